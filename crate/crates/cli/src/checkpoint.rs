//! Binary checkpoints: magic, format version, a `key = value` text header,
//! named little-endian `f32` parameter tables and a CRC-32 trailer.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"UPDETCKP"  u32 version  u32 header_len  header (UTF-8)
//! u32 n_tables
//!   per table: u32 name_len  name  u32 rank  u32 dims[rank]  f32 values[prod(dims)]
//! u32 crc32 of every preceding byte
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;
use updet::battlesim::ScenarioSpec;
use updet::mixer::{MixerConfig, MixerKind};
use updet::model::{AgentModel, HeadMode, ModelConfig};
use updet::numerics::{ParamStore, Tensor};
use updet::trainer::{Learner, Progress, RngState, TrainerConfig};

pub const MAGIC: &[u8; 8] = b"UPDETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated or corrupted: checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("model config mismatch: checkpoint has {stored}, run requests {requested}")]
    ConfigMismatch { stored: String, requested: String },
    #[error("shape mismatch for {name}: checkpoint {stored:?}, model {expected:?}; {hint}")]
    Shape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
        hint: String,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint holds unexpected parameter {0}")]
    Unexpected(String),
    #[error("{0}")]
    Model(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// One named parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub mixer: MixerConfig,
    /// Scenario the parameters were trained on.
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub progress: Progress,
    pub rng: RngState,
    pub tables: Vec<Table>,
}

impl Checkpoint {
    /// Snapshot of the online parameters of `learner`.
    pub fn from_learner(
        learner: &Learner,
        scenario: &ScenarioSpec,
        seed: u64,
        progress: Progress,
        rng: RngState,
    ) -> Self {
        Self {
            model: learner.model.config().clone(),
            mixer: learner.mixer.config().clone(),
            scenario: scenario.clone(),
            seed,
            progress,
            rng,
            tables: tables_of(&learner.params),
        }
    }

    /// Fails unless `requested` equals the stored model configuration.
    pub fn check_model_config(&self, requested: &ModelConfig) -> Result<()> {
        if &self.model != requested {
            return Err(CheckpointError::ConfigMismatch {
                stored: model_summary(&self.model),
                requested: model_summary(requested),
            });
        }
        Ok(())
    }

    /// All stored tables as `f64` parameters, in file order.
    pub fn params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for t in &self.tables {
            let data = t.values.iter().map(|&v| f64::from(v)).collect();
            store.add(
                t.name.clone(),
                Tensor::new(t.shape.clone(), data).expect("table shape"),
            );
        }
        store
    }

    /// Builds the agent network for `scenario` and loads the agent tables,
    /// requiring every name and shape to match.
    pub fn load_agent(&self, scenario: &ScenarioSpec) -> Result<(AgentModel, ParamStore)> {
        let (model, mut store) =
            AgentModel::build(self.model.clone(), scenario.action_groups(), self.seed)
                .map_err(|e| CheckpointError::Model(e.to_string()))?;
        self.fill(&mut store, updet::model::PARAM_PREFIX, scenario)?;
        Ok((model, store))
    }

    /// Builds a full learner for `scenario` (target equal to the loaded
    /// online parameters, fresh optimizer statistics).
    pub fn load_learner(&self, scenario: &ScenarioSpec, cfg: &TrainerConfig) -> Result<Learner> {
        let mut learner = Learner::new(
            self.model.clone(),
            self.mixer.clone(),
            scenario,
            cfg,
            self.seed,
        )
        .map_err(|e| CheckpointError::Model(e.to_string()))?;
        self.fill(&mut learner.params, "", scenario)?;
        learner.update_target();
        Ok(learner)
    }

    fn fill(&self, store: &mut ParamStore, prefix: &str, scenario: &ScenarioSpec) -> Result<()> {
        for t in self.tables.iter().filter(|t| t.name.starts_with(prefix)) {
            if store.find(&t.name).is_none() {
                return Err(CheckpointError::Unexpected(t.name.clone()));
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            if !name.starts_with(prefix) {
                continue;
            }
            let table = self
                .tables
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let expected = store.value(id).shape().to_vec();
            if table.shape != expected {
                return Err(CheckpointError::Shape {
                    name,
                    stored: table.shape.clone(),
                    expected,
                    hint: self.shape_hint(scenario),
                });
            }
            let data = table.values.iter().map(|&v| f64::from(v)).collect();
            *store.value_mut(id) = Tensor::new(expected, data).expect("checked shape");
        }
        Ok(())
    }

    fn shape_hint(&self, scenario: &ScenarioSpec) -> String {
        let size = format!(
            "checkpoint trained on {}v{}, requested {}v{}",
            self.scenario.n_ally, self.scenario.n_enemy, scenario.n_ally, scenario.n_enemy
        );
        match self.model.head_mode {
            HeadMode::Gru | HeadMode::Vanilla | HeadMode::Aggregation => format!(
                "{size}; the {} network's input and output layers are sized by the team sizes, \
                 so it cannot be loaded unchanged (use `transfer` to rebuild them)",
                self.model.head_mode
            ),
            _ => format!("{size}; mixer parameters depend on the number of agents"),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.tables.len());
        for t in &self.tables {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(CheckpointError::Checksum);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
        let mut ckpt = parse_header(header)?;
        let n_tables = r.u32()? as usize;
        for _ in 0..n_tables {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("table name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflow")))?;
            let raw =
                r.take(count.checked_mul(4).ok_or_else(|| {
                    CheckpointError::Malformed(format!("{name}: shape overflow"))
                })?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            ckpt.tables.push(Table {
                name,
                shape,
                values,
            });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(
                "trailing bytes after tables".into(),
            ));
        }
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    fn header(&self) -> String {
        let mut h = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(h, "{k} = {v}").expect("string write");
        };
        let m = &self.model;
        kv("model.d_emb", &m.d_emb);
        kv("model.n_heads", &m.n_heads);
        kv("model.n_layers", &m.n_layers);
        kv("model.d_channel", &m.d_channel);
        kv("model.block_mode", &m.block_mode);
        kv("model.head_mode", &m.head_mode);
        kv("model.hidden_mode", &m.hidden_mode);
        kv("model.rnn_hidden", &m.rnn_hidden);
        kv("model.ln_eps", &m.ln_eps);
        let x = &self.mixer;
        kv("mixer.kind", &x.kind);
        kv("mixer.mixing_embed", &x.mixing_embed);
        kv("mixer.hypernet_layers", &x.hypernet_layers);
        kv("mixer.hypernet_embed", &x.hypernet_embed);
        let s = &self.scenario;
        kv("scenario.n_ally", &s.n_ally);
        kv("scenario.n_enemy", &s.n_enemy);
        kv("scenario.grid_w", &s.grid_w);
        kv("scenario.grid_h", &s.grid_h);
        kv("scenario.unit_hp", &s.unit_hp);
        kv("scenario.attack_damage", &s.attack_damage);
        kv("scenario.attack_range", &s.attack_range);
        kv("scenario.view_radius", &s.view_radius);
        kv("scenario.max_cooldown", &s.max_cooldown);
        kv("scenario.max_steps", &s.max_steps);
        kv("scenario.win_bonus", &s.win_bonus);
        kv("scenario.spawn_band", &s.spawn_band);
        kv("scenario.seed", &s.seed);
        kv("seed", &self.seed);
        kv("progress.env_steps", &self.progress.env_steps);
        kv("progress.episodes", &self.progress.episodes);
        kv("progress.train_steps", &self.progress.train_steps);
        let hex: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        kv("rng.seed", &hex);
        kv("rng.stream", &self.rng.stream);
        kv("rng.word_pos", &self.rng.word_pos);
        h
    }
}

fn tables_of(store: &ParamStore) -> Vec<Table> {
    store
        .iter()
        .map(|p| Table {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            values: p.value.data().iter().map(|&v| v as f32).collect(),
        })
        .collect()
}

fn model_summary(m: &ModelConfig) -> String {
    format!(
        "head={} block={} hidden={} d_emb={} heads={} layers={} channel={} rnn_hidden={} ln_eps={}",
        m.head_mode,
        m.block_mode,
        m.hidden_mode,
        m.d_emb,
        m.n_heads,
        m.n_layers,
        m.d_channel,
        m.rnn_hidden,
        m.ln_eps
    )
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn parse_header(text: &str) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint {
        model: ModelConfig::default(),
        mixer: MixerConfig::default(),
        scenario: ScenarioSpec::default(),
        seed: 0,
        progress: Progress::default(),
        rng: RngState {
            seed: [0; 32],
            stream: 0,
            word_pos: 0,
        },
        tables: Vec::new(),
    };
    let mut seen = std::collections::BTreeSet::new();
    for line in text.lines() {
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| CheckpointError::Malformed(format!("header line {line:?}")))?;
        if !seen.insert(key) {
            return Err(CheckpointError::Malformed(format!(
                "duplicate header key {key}"
            )));
        }
        set_header_field(&mut ckpt, key, value)
            .map_err(|e| CheckpointError::Malformed(format!("header {key}: {e}")))?;
    }
    if seen.len() != HEADER_KEYS {
        return Err(CheckpointError::Malformed(format!(
            "header has {} keys, expected {HEADER_KEYS}",
            seen.len()
        )));
    }
    Ok(ckpt)
}

const HEADER_KEYS: usize = 33;

fn set_header_field(c: &mut Checkpoint, key: &str, v: &str) -> std::result::Result<(), String> {
    fn p<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        v.parse::<T>().map_err(|e| e.to_string())
    }
    let (m, x, s) = (&mut c.model, &mut c.mixer, &mut c.scenario);
    match key {
        "model.d_emb" => m.d_emb = p(v)?,
        "model.n_heads" => m.n_heads = p(v)?,
        "model.n_layers" => m.n_layers = p(v)?,
        "model.d_channel" => m.d_channel = p(v)?,
        "model.block_mode" => m.block_mode = p(v)?,
        "model.head_mode" => m.head_mode = p(v)?,
        "model.hidden_mode" => m.hidden_mode = p(v)?,
        "model.rnn_hidden" => m.rnn_hidden = p(v)?,
        "model.ln_eps" => m.ln_eps = p(v)?,
        "mixer.kind" => x.kind = p::<MixerKind>(v)?,
        "mixer.mixing_embed" => x.mixing_embed = p(v)?,
        "mixer.hypernet_layers" => x.hypernet_layers = p(v)?,
        "mixer.hypernet_embed" => x.hypernet_embed = p(v)?,
        "scenario.n_ally" => s.n_ally = p(v)?,
        "scenario.n_enemy" => s.n_enemy = p(v)?,
        "scenario.grid_w" => s.grid_w = p(v)?,
        "scenario.grid_h" => s.grid_h = p(v)?,
        "scenario.unit_hp" => s.unit_hp = p(v)?,
        "scenario.attack_damage" => s.attack_damage = p(v)?,
        "scenario.attack_range" => s.attack_range = p(v)?,
        "scenario.view_radius" => s.view_radius = p(v)?,
        "scenario.max_cooldown" => s.max_cooldown = p(v)?,
        "scenario.max_steps" => s.max_steps = p(v)?,
        "scenario.win_bonus" => s.win_bonus = p(v)?,
        "scenario.spawn_band" => s.spawn_band = p(v)?,
        "scenario.seed" => s.seed = p(v)?,
        "seed" => c.seed = p(v)?,
        "progress.env_steps" => c.progress.env_steps = p(v)?,
        "progress.episodes" => c.progress.episodes = p(v)?,
        "progress.train_steps" => c.progress.train_steps = p(v)?,
        "rng.seed" => {
            if v.len() != 64 {
                return Err("expected 64 hex digits".into());
            }
            for (i, b) in c.rng.seed.iter_mut().enumerate() {
                *b = u8::from_str_radix(&v[2 * i..2 * i + 2], 16).map_err(|e| e.to_string())?;
            }
        }
        "rng.stream" => c.rng.stream = p(v)?,
        "rng.word_pos" => c.rng.word_pos = p(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")
    })?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
