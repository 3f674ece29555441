//! The train, eval, transfer and attention commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use updet::battlesim::{BattleEnv, ScenarioSpec};
use updet::model::{greedy_action, HeadMode};
use updet::trainer::{evaluate, evaluation_seed, EvalStats, Flow, Learner, MetricsRecord, Trainer};

use crate::checkpoint::{write_atomic, Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::CliError;

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str = "env_step,loss,epsilon,win_rate,mean_return,ep_len";

/// One CSV row; floats use the shortest representation that parses back
/// to the same value, a missing loss is an empty field.
pub fn metrics_row(r: &MetricsRecord) -> String {
    let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{}",
        r.env_step, loss, r.epsilon, r.win_rate, r.mean_return, r.ep_len
    )
}

/// Inverse of [`metrics_row`].
pub fn parse_metrics_row(line: &str) -> Option<MetricsRecord> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 6 {
        return None;
    }
    let loss = if f[1].is_empty() {
        None
    } else {
        Some(f[1].parse().ok()?)
    };
    Some(MetricsRecord {
        env_step: f[0].parse().ok()?,
        loss,
        epsilon: f[2].parse().ok()?,
        win_rate: f[3].parse().ok()?,
        mean_return: f[4].parse().ok()?,
        ep_len: f[5].parse().ok()?,
    })
}

/// Records of a `metrics.csv` file, or `None` if it is missing or malformed.
pub fn read_metrics(path: &Path) -> Option<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    if lines.next()? != METRICS_HEADER {
        return None;
    }
    lines.map(parse_metrics_row).collect()
}

/// Rollout worker count: available cores, capped by `UPDET_THREADS`.
pub fn thread_budget() -> usize {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("UPDET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(cap) => cap.clamp(1, cores.max(1)),
        None => cores,
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<MetricsRecord>,
    pub final_checkpoint: PathBuf,
    /// Parameters initialized fresh by a transfer.
    pub fresh_params: Vec<String>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir.join("checkpoints"))
        .and_then(|_| write_atomic(&dir.join(".write_probe"), b""))
        .and_then(|_| fs::remove_file(dir.join(".write_probe")))
        .map_err(|e| {
            CliError::Config(format!(
                "output directory {} is not writable: {e}",
                dir.display()
            ))
        })
}

/// Decides after each metrics record whether training ends early.
pub type StopRule<'a> = &'a mut dyn FnMut(&MetricsRecord) -> bool;

/// Trains from scratch, or resumes when `cfg.checkpoint` is set.
pub fn cmd_train(cfg: &RunConfig, threads: usize) -> Result<TrainSummary, CliError> {
    cmd_train_until(cfg, threads, &mut |_| false)
}

/// [`cmd_train`] that also ends once `stop` returns true; the final
/// checkpoint is written at that point.
pub fn cmd_train_until(
    cfg: &RunConfig,
    threads: usize,
    stop: StopRule,
) -> Result<TrainSummary, CliError> {
    cfg.validate().map_err(CliError::Config)?;
    let resume = match &cfg.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.check_model_config(&cfg.model)?;
            if ckpt.mixer != cfg.mixer {
                return Err(CheckpointError::ConfigMismatch {
                    stored: format!("mixer {:?}", ckpt.mixer),
                    requested: format!("mixer {:?}", cfg.mixer),
                }
                .into());
            }
            Some(ckpt)
        }
        None => None,
    };
    prepare_out_dir(&cfg.out_dir)?;
    let mut trainer = match &resume {
        Some(ckpt) => {
            let learner = ckpt.load_learner(&cfg.scenario, &cfg.trainer)?;
            let mut t = Trainer::with_learner(
                cfg.trainer.clone(),
                cfg.scenario.clone(),
                learner,
                cfg.seed,
            )?;
            t.resume(ckpt.progress, ckpt.rng);
            t
        }
        None => Trainer::new(
            cfg.trainer.clone(),
            cfg.scenario.clone(),
            cfg.model.clone(),
            cfg.mixer.clone(),
            cfg.seed,
        )?,
    };
    trainer.set_eval_threads(threads);
    let prior = if resume.is_some() {
        existing_rows(
            &cfg.out_dir.join("metrics.csv"),
            trainer.progress().env_steps,
        )
    } else {
        Vec::new()
    };
    run_training(cfg, trainer, prior, Vec::new(), stop)
}

/// Fine-tunes on `cfg.scenario` starting from the checkpoint at
/// `cfg.checkpoint`. Architecture and mixer settings come from the
/// checkpoint; parameters whose shape changed are initialized fresh. The
/// first metrics row is the zero-shot evaluation.
pub fn cmd_transfer(cfg: &RunConfig, threads: usize) -> Result<TrainSummary, CliError> {
    cmd_transfer_until(cfg, threads, &mut |_| false)
}

/// [`cmd_transfer`] with an early-stop rule, as in [`cmd_train_until`].
pub fn cmd_transfer_until(
    cfg: &RunConfig,
    threads: usize,
    stop: StopRule,
) -> Result<TrainSummary, CliError> {
    cfg.validate().map_err(CliError::Config)?;
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("transfer needs --checkpoint".into()))?;
    let ckpt = Checkpoint::load(path)?;
    prepare_out_dir(&cfg.out_dir)?;
    let (learner, fresh) = Learner::transfer_from(
        &ckpt.params(),
        ckpt.model.clone(),
        ckpt.mixer.clone(),
        &cfg.scenario,
        &cfg.trainer,
        cfg.seed,
    )?;
    let mut trainer =
        Trainer::with_learner(cfg.trainer.clone(), cfg.scenario.clone(), learner, cfg.seed)?;
    trainer.set_eval_threads(threads);
    run_training(cfg, trainer, Vec::new(), fresh, stop)
}

fn existing_rows(path: &Path, up_to: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Vec::new();
    }
    lines
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= up_to)
        })
        .map(str::to_string)
        .collect()
}

fn write_metrics(path: &Path, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

fn snapshot(cfg: &RunConfig, trainer: &Trainer) -> Checkpoint {
    Checkpoint::from_learner(
        trainer.learner(),
        trainer.scenario(),
        cfg.seed,
        trainer.progress(),
        trainer.rng_state(),
    )
}

fn run_training(
    cfg: &RunConfig,
    mut trainer: Trainer,
    mut rows: Vec<String>,
    fresh_params: Vec<String>,
    stop: StopRule,
) -> Result<TrainSummary, CliError> {
    let metrics = cfg.out_dir.join("metrics.csv");
    write_metrics(&metrics, &rows)?;
    if cfg.trainer.t_max == 0 {
        let path = cfg.out_dir.join("init.ckpt");
        snapshot(cfg, &trainer).save(&path)?;
        return Ok(TrainSummary {
            records: Vec::new(),
            final_checkpoint: path,
            fresh_params,
        });
    }
    let mut failure: Option<CliError> = None;
    let records = trainer.run(|t, rec| {
        rows.push(metrics_row(rec));
        let step = cfg
            .out_dir
            .join("checkpoints")
            .join(format!("step_{:010}.ckpt", rec.env_step));
        let result = write_metrics(&metrics, &rows).and_then(|_| Ok(snapshot(cfg, t).save(&step)?));
        match result {
            Ok(()) if stop(rec) => Flow::Stop,
            Ok(()) => Flow::Continue,
            Err(e) => {
                failure = Some(e);
                Flow::Stop
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let final_checkpoint = cfg.out_dir.join("final.ckpt");
    snapshot(cfg, &trainer).save(&final_checkpoint)?;
    Ok(TrainSummary {
        records,
        final_checkpoint,
        fresh_params,
    })
}

/// Greedy evaluation of the checkpoint at `cfg.checkpoint` on
/// `cfg.scenario`; appends a row to `eval.csv` in the output directory.
pub fn cmd_eval(cfg: &RunConfig, episodes: usize, threads: usize) -> Result<EvalStats, CliError> {
    cfg.scenario
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if episodes == 0 {
        return Err(CliError::Config("episodes must be positive".into()));
    }
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("eval needs --checkpoint".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let (model, store) = ckpt.load_agent(&cfg.scenario)?;
    let stats = evaluate(&cfg.scenario, &model, &store, episodes, threads)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let csv = cfg.out_dir.join("eval.csv");
    let mut text = fs::read_to_string(&csv)
        .ok()
        .filter(|t| t.starts_with(EVAL_HEADER))
        .unwrap_or_else(|| format!("{EVAL_HEADER}\n"));
    writeln!(
        text,
        "{},{}x{},{},{},{},{}",
        path.display(),
        cfg.scenario.n_ally,
        cfg.scenario.n_enemy,
        stats.episodes,
        stats.win_rate,
        stats.mean_return,
        stats.mean_len
    )
    .expect("string write");
    write_atomic(&csv, text.as_bytes()).map_err(|e| io_err(&csv, e))?;
    Ok(stats)
}

const EVAL_HEADER: &str = "checkpoint,scenario,episodes,win_rate,mean_return,mean_len";

/// Grouped attention of agent 0 at one tick.
#[derive(Debug, Clone)]
pub struct AttentionTick {
    pub episode: usize,
    pub tick: usize,
    pub action: usize,
    pub labels: Vec<String>,
    /// Row-major `[n_entities, n_entities]`.
    pub matrix: Vec<f64>,
}

/// Column labels for agent 0's view; dead enemies carry a `(dead)` suffix.
pub fn entity_labels(env: &BattleEnv) -> Vec<String> {
    let s = env.spec();
    let mut labels = vec!["self".to_string()];
    labels.extend((1..s.n_ally).map(|i| format!("ally{i}")));
    for j in 0..s.n_enemy {
        let dead = !env.units()[s.n_ally + j].alive;
        labels.push(format!(
            "enemy{}{}",
            j + 1,
            if dead { "(dead)" } else { "" }
        ));
    }
    labels
}

/// Plays `episodes` greedy evaluation episodes and records agent 0's
/// grouped attention at every tick.
pub fn attention_trace(
    ckpt: &Checkpoint,
    scenario: &ScenarioSpec,
    episodes: usize,
) -> Result<Vec<AttentionTick>, CliError> {
    if ckpt.model.head_mode != HeadMode::Updet {
        return Err(CliError::Unsupported(format!(
            "attention export needs an updet checkpoint, got {}",
            ckpt.model.head_mode
        )));
    }
    let (model, store) = ckpt.load_agent(scenario)?;
    let n = scenario.n_ally;
    let a_dim = scenario.n_actions();
    let mut out = Vec::new();
    for episode in 0..episodes {
        let mut env = BattleEnv::new(scenario.clone().with_seed(evaluation_seed(episode)))?;
        let mut step = env.reset();
        let mut hidden = model.initial_hidden(n);
        for tick in 0.. {
            let labels = entity_labels(&env);
            let export =
                model.export_attention(&store, &step.observations[0], &hidden.select_rows(&[0]))?;
            let (q, next_hidden) = model.forward_batch(&store, &step.observations, &hidden)?;
            hidden = next_hidden;
            let actions: Vec<usize> = step
                .avail_actions
                .iter()
                .enumerate()
                .map(|(i, mask)| {
                    greedy_action(&q.data()[i * a_dim..(i + 1) * a_dim], mask)
                        .expect("no-op is always available")
                })
                .collect();
            out.push(AttentionTick {
                episode,
                tick,
                action: actions[0],
                labels,
                matrix: export.grouped.into_data(),
            });
            step = env.step(&actions)?;
            if step.terminal {
                break;
            }
        }
    }
    Ok(out)
}

/// Portable greymap (plain text) with `cell`-pixel squares; weight 1 is white.
pub fn heatmap_pgm(matrix: &[f64], n: usize, cell: usize) -> String {
    let side = n * cell;
    let mut s = format!("P2\n{side} {side}\n255\n");
    for y in 0..side {
        let row: Vec<String> = (0..side)
            .map(|x| {
                let w = matrix[(y / cell) * n + x / cell].clamp(0.0, 1.0);
                ((w * 255.0).round() as u8).to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Writes `attention.csv` and one heatmap per tick under the output directory.
pub fn cmd_attention(cfg: &RunConfig, episodes: usize) -> Result<Vec<AttentionTick>, CliError> {
    cfg.scenario
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("attention needs --checkpoint".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let ticks = attention_trace(&ckpt, &cfg.scenario, episodes)?;
    let dir = cfg.out_dir.join("attention");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let n = cfg.scenario.n_entities();
    let mut csv = String::from("episode,tick,action,row");
    for c in 0..n {
        write!(csv, ",c{c}").expect("string write");
    }
    csv.push('\n');
    for t in &ticks {
        writeln!(
            csv,
            "{},{},{},columns,{}",
            t.episode,
            t.tick,
            t.action,
            t.labels.join(",")
        )
        .expect("string write");
        for (r, row) in t.matrix.chunks_exact(n).enumerate() {
            let label = t.labels[r].trim_end_matches("(dead)");
            let values: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(
                csv,
                "{},{},{},{},{}",
                t.episode,
                t.tick,
                t.action,
                label,
                values.join(",")
            )
            .expect("string write");
        }
        let pgm = dir.join(format!("ep{:03}_t{:03}.pgm", t.episode, t.tick));
        write_atomic(&pgm, heatmap_pgm(&t.matrix, n, 16).as_bytes())
            .map_err(|e| io_err(&pgm, e))?;
    }
    let csv_path = dir.join("attention.csv");
    write_atomic(&csv_path, csv.as_bytes()).map_err(|e| io_err(&csv_path, e))?;
    Ok(ticks)
}
