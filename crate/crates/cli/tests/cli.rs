use std::path::{Path, PathBuf};
use std::process::Command;

use updet::battlesim::ScenarioSpec;
use updet::model::{HeadMode, ModelConfig};
use updet::trainer::{evaluate, Learner, Progress, RngState, TrainerConfig};
use updet_cli::checkpoint::{Checkpoint, CheckpointError, MAGIC};
use updet_cli::commands::{
    attention_trace, cmd_attention, cmd_eval, cmd_train, cmd_train_until, cmd_transfer,
    heatmap_pgm, metrics_row, parse_metrics_row, read_metrics, METRICS_HEADER,
};
use updet_cli::{CliError, RunConfig};

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("updet-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = out.to_path_buf();
    cfg.seed = 11;
    cfg.model.d_emb = 8;
    cfg.model.n_heads = 2;
    cfg.model.n_layers = 1;
    cfg.model.d_channel = 8;
    cfg.model.rnn_hidden = 8;
    cfg.trainer.batch_size = 2;
    cfg.trainer.buffer_capacity = 8;
    cfg.trainer.test_interval = 60;
    cfg.trainer.test_episodes = 2;
    cfg.trainer.t_max = 120;
    cfg
}

fn checkpoint_for(head: HeadMode, scenario: &ScenarioSpec) -> Checkpoint {
    let model = ModelConfig {
        head_mode: head,
        d_emb: 8,
        n_heads: 2,
        n_layers: 1,
        d_channel: 8,
        rnn_hidden: 8,
        ..ModelConfig::default()
    };
    let cfg = TrainerConfig::default();
    let learner = Learner::new(model, Default::default(), scenario, &cfg, 5).unwrap();
    let rng = RngState {
        seed: [7; 32],
        stream: 3,
        word_pos: 12345,
    };
    let progress = Progress {
        env_steps: 10,
        episodes: 2,
        train_steps: 1,
    };
    Checkpoint::from_learner(&learner, scenario, 5, progress, rng)
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = temp_dir("roundtrip");
    let ckpt = checkpoint_for(HeadMode::Updet, &ScenarioSpec::new(3, 3));
    let a = dir.join("a.ckpt");
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    let b = dir.join("b.ckpt");
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(&std::fs::read(&a).unwrap()[..8], MAGIC);
}

#[test]
fn corruption_is_detected() {
    let bytes = checkpoint_for(HeadMode::Updet, &ScenarioSpec::new(3, 3)).to_bytes();
    let truncated = &bytes[..bytes.len() - 1];
    assert!(matches!(
        Checkpoint::from_bytes(truncated),
        Err(CheckpointError::Checksum)
    ));
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(CheckpointError::Checksum)
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&magic),
        Err(CheckpointError::BadMagic)
    ));
    let mut version = bytes[..bytes.len() - 4].to_vec();
    version[8] = 9;
    let crc = crc32fast::hash(&version);
    version.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&version),
        Err(CheckpointError::Version { found: 9 })
    ));
}

#[test]
fn model_config_mismatch_is_explicit() {
    let ckpt = checkpoint_for(HeadMode::Updet, &ScenarioSpec::new(3, 3));
    let other = ModelConfig {
        d_emb: 16,
        ..ckpt.model.clone()
    };
    assert!(ckpt.check_model_config(&ckpt.model).is_ok());
    assert!(matches!(
        ckpt.check_model_config(&other),
        Err(CheckpointError::ConfigMismatch { .. })
    ));
}

#[test]
fn updet_loads_on_every_size_and_gru_does_not() {
    let ckpt = checkpoint_for(HeadMode::Updet, &ScenarioSpec::new(3, 3));
    let mut checksums = Vec::new();
    for n in [3, 5, 7] {
        let spec = ScenarioSpec::new(n, n);
        let (model, store) = ckpt.load_agent(&spec).unwrap();
        checksums.push(store.prefix_layout_checksum(updet::model::PARAM_PREFIX));
        let stats = evaluate(&spec, &model, &store, 1, 1).unwrap();
        assert_eq!(stats.episodes, 1);
    }
    assert!(checksums.windows(2).all(|w| w[0] == w[1]));

    let gru = checkpoint_for(HeadMode::Gru, &ScenarioSpec::new(3, 3));
    assert!(gru.load_agent(&ScenarioSpec::new(3, 3)).is_ok());
    match gru.load_agent(&ScenarioSpec::new(7, 7)) {
        Err(CheckpointError::Shape { name, hint, .. }) => {
            assert!(name.starts_with("agent.gru."), "{name}");
            assert!(hint.contains("transfer"), "{hint}");
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn budget_zero_writes_header_and_init_checkpoint() {
    let dir = temp_dir("budget0");
    let mut cfg = tiny_config(&dir);
    cfg.trainer.t_max = 0;
    let summary = cmd_train(&cfg, 1).unwrap();
    assert!(summary.records.is_empty());
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics, format!("{METRICS_HEADER}\n"));
    assert!(Checkpoint::load(&dir.join("init.ckpt")).is_ok());
}

#[test]
fn train_then_resume_continues_monotonically() {
    let dir = temp_dir("resume");
    let cfg = tiny_config(&dir);
    let first = cmd_train(&cfg, 1).unwrap();
    let last_step = first.records.last().unwrap().env_step;
    assert!(last_step >= cfg.trainer.t_max);
    assert!(std::fs::read_dir(dir.join("checkpoints")).unwrap().count() >= 2);

    let mut again = cfg.clone();
    again.checkpoint = Some(first.final_checkpoint.clone());
    again.trainer.t_max = last_step + 100;
    let second = cmd_train(&again, 1).unwrap();
    assert!(second.records.first().unwrap().env_step > last_step);

    let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let steps: Vec<u64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps[0], 0);
    assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
    assert_eq!(steps.len(), first.records.len() + second.records.len());

    let mut wrong = again.clone();
    wrong.model.d_emb = 16;
    assert!(matches!(
        cmd_train(&wrong, 1),
        Err(CliError::Checkpoint(CheckpointError::ConfigMismatch { .. }))
    ));
}

#[test]
fn training_is_deterministic() {
    let a = cmd_train(&tiny_config(&temp_dir("det-a")), 1).unwrap();
    let b = cmd_train(&tiny_config(&temp_dir("det-b")), 1).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(
        std::fs::read(&a.final_checkpoint).unwrap(),
        std::fs::read(&b.final_checkpoint).unwrap()
    );
}

#[test]
fn metrics_rows_round_trip_floats() {
    let rec = updet::trainer::MetricsRecord {
        env_step: 42,
        loss: Some(0.1 + 0.2),
        epsilon: 1.0 / 3.0,
        win_rate: 0.15625,
        mean_return: -2.0 / 7.0,
        ep_len: 21.6,
    };
    let row = metrics_row(&rec);
    let f: Vec<&str> = row.split(',').collect();
    assert_eq!(f.len(), METRICS_HEADER.split(',').count());
    assert_eq!(f[1].parse::<f64>().unwrap(), 0.1 + 0.2);
    assert_eq!(f[2].parse::<f64>().unwrap(), 1.0 / 3.0);
    assert_eq!(f[4].parse::<f64>().unwrap(), -2.0 / 7.0);
    assert_eq!(parse_metrics_row(&row), Some(rec.clone()));
    let none = metrics_row(&updet::trainer::MetricsRecord { loss: None, ..rec });
    assert_eq!(none.split(',').nth(1), Some(""));
    assert_eq!(parse_metrics_row(&none).unwrap().loss, None);
    assert_eq!(parse_metrics_row("1,2,3"), None);
}

#[test]
fn early_stop_rule_ends_training_with_final_checkpoint() {
    let dir = temp_dir("stop");
    let cfg = tiny_config(&dir);
    let mut seen = 0;
    let summary = cmd_train_until(&cfg, 1, &mut |r| {
        seen += 1;
        r.env_step > 0
    })
    .unwrap();
    assert_eq!(seen, 2);
    assert_eq!(summary.records.len(), 2);
    assert!(summary.records[1].env_step < cfg.trainer.t_max);
    assert!(summary.final_checkpoint.exists());
    assert_eq!(
        read_metrics(&dir.join("metrics.csv")).unwrap(),
        summary.records
    );
}

#[test]
fn eval_is_repeatable_and_transfer_starts_from_zero_shot() {
    let dir = temp_dir("eval");
    let ckpt = checkpoint_for(HeadMode::Updet, &ScenarioSpec::new(3, 3));
    let path = dir.join("src.ckpt");
    ckpt.save(&path).unwrap();
    let mut cfg = tiny_config(&dir);
    cfg.model = ckpt.model.clone();
    cfg.checkpoint = Some(path);

    let a = cmd_eval(&cfg, 4, 1).unwrap();
    let b = cmd_eval(&cfg, 4, 1).unwrap();
    assert_eq!(a, b);
    let one = cmd_eval(&cfg, 1, 1).unwrap();
    assert!(one.win_rate == 0.0 || one.win_rate == 1.0);
    let csv = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    cfg.trainer.test_episodes = 4;
    let t = cmd_transfer(&cfg, 1).unwrap();
    assert!(t.fresh_params.is_empty());
    assert_eq!(t.records[0].env_step, 0);
    assert_eq!(t.records[0].win_rate, a.win_rate);
    assert_eq!(t.records[0].mean_return, a.mean_return);

    let mut big = cfg.clone();
    big.scenario = ScenarioSpec::new(7, 7);
    big.out_dir = dir.join("big");
    big.trainer.t_max = 30;
    let t7 = cmd_transfer(&big, 1).unwrap();
    assert!(t7.fresh_params.is_empty(), "{:?}", t7.fresh_params);
}

#[test]
fn gru_transfer_keeps_the_recurrent_cell() {
    let dir = temp_dir("gru");
    let ckpt = checkpoint_for(HeadMode::Gru, &ScenarioSpec::new(3, 3));
    let path = dir.join("gru.ckpt");
    ckpt.save(&path).unwrap();
    let mut cfg = tiny_config(&dir);
    cfg.checkpoint = Some(path);
    cfg.scenario = ScenarioSpec::new(7, 7);
    assert!(matches!(
        cmd_eval(&cfg, 1, 1),
        Err(CliError::Checkpoint(CheckpointError::Shape { .. }))
    ));
    cfg.trainer.t_max = 30;
    let t = cmd_transfer(&cfg, 1).unwrap();
    assert!(t
        .fresh_params
        .iter()
        .any(|n| n.starts_with("agent.gru.encoder")));
    assert!(t
        .fresh_params
        .iter()
        .any(|n| n.starts_with("agent.gru.head")));
    assert!(!t
        .fresh_params
        .iter()
        .any(|n| n.starts_with("agent.gru.cell")));
}

#[test]
fn attention_export_is_row_stochastic_and_flags_dead_enemies() {
    let dir = temp_dir("attention");
    let ckpt = checkpoint_for(HeadMode::Updet, &ScenarioSpec::new(3, 3));
    let path = dir.join("u.ckpt");
    ckpt.save(&path).unwrap();
    let mut cfg = tiny_config(&dir);
    cfg.checkpoint = Some(path);
    let ticks = cmd_attention(&cfg, 2).unwrap();
    assert!(!ticks.is_empty());
    for t in &ticks {
        assert_eq!(t.matrix.len(), 36);
        assert_eq!(t.labels.len(), 6);
        for row in t.matrix.chunks_exact(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let csv = std::fs::read_to_string(dir.join("attention").join("attention.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + ticks.len() * 7);
    let pgm = std::fs::read_to_string(dir.join("attention").join("ep000_t000.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n96 96\n255\n"));

    let gru = checkpoint_for(HeadMode::Gru, &ScenarioSpec::new(3, 3));
    assert!(matches!(
        attention_trace(&gru, &ScenarioSpec::new(3, 3), 1),
        Err(CliError::Unsupported(_))
    ));
}

#[test]
fn dead_enemy_label() {
    use updet::battlesim::BattleEnv;
    use updet_cli::commands::entity_labels;
    let mut env = BattleEnv::new(ScenarioSpec::new(2, 2)).unwrap();
    let mut units = env.units().to_vec();
    units[3].alive = false;
    units[3].hp = 0;
    env.set_units(units).unwrap();
    assert_eq!(
        entity_labels(&env),
        ["self", "ally1", "enemy1", "enemy2(dead)"]
    );
}

#[test]
fn heatmap_scales_weights() {
    let pgm = heatmap_pgm(&[1.0, 0.0, 0.5, 0.5], 2, 1);
    assert_eq!(pgm, "P2\n2 2\n255\n255 0\n128 128\n");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_updet");
    let dir = temp_dir("exit");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["train", "--set", "trainer.gamma=2"]), Some(2));
    assert_eq!(status(&["train", "--scenario", "3by3"]), Some(2));
    let junk = dir.join("junk.ckpt");
    std::fs::write(&junk, b"UPDETCKP garbage").unwrap();
    assert_eq!(
        status(&["eval", "--checkpoint", junk.to_str().unwrap()]),
        Some(3)
    );
    let out = dir.join("run");
    assert_eq!(
        status(&[
            "train",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "trainer.t_max=0"
        ]),
        Some(0)
    );
    assert!(out.join("init.ckpt").exists());
}
