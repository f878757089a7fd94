//! Run configuration: task, architecture, optimizer and paths.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdadeltaConfig, AdamConfig, OptimizerConfig};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $var),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$var),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} '{s}' (expected one of: {})",
                        stringify!($name).to_lowercase(),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(Task { Nli => "nli", Sa => "sa" });

named_enum!(EncoderKind {
    Lstm1 => "lstm1",
    Blstm1 => "blstm1",
    Lstm2 => "lstm2",
    Blstm2 => "blstm2",
    Tree => "tree",
    Snelsd => "snelsd",
});

named_enum!(
    /// Auxiliary representation concatenated per position with the primary
    /// encoder's states.
    Joint {
        None => "none",
        WordEmbedding => "word-embedding",
        Blstm1 => "blstm1",
    }
);

impl EncoderKind {
    pub fn has_detection(self) -> bool {
        self == EncoderKind::Snelsd
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub encoder: EncoderKind,
    pub joint_with: Joint,
    /// Append the auxiliary BLSTM states after inference collection instead
    /// of at the encoder output (inference task, `joint_with = blstm1`).
    pub late_fusion: bool,
    pub d_emb: usize,
    /// Hidden width of the encoder; also the chunk-vector width.
    pub d_hidden: usize,
    /// Per-direction width of the inference composition BLSTM.
    pub d_compose: usize,
    pub mlp_hidden: Option<usize>,
    /// Width of the rectified-linear reduction before composition.
    pub reduce: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub lowercase: bool,
    /// Number of independent trials; trial `k` runs with seed `seed + k`.
    pub trials: usize,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_task(Task::Nli)
    }
}

impl RunConfig {
    /// Default training setup for each task: Adam with lr 4e-4, batch 128
    /// and dropout 0.5 for inference; Adadelta, batch 16, no dropout for
    /// sentiment.
    pub fn for_task(task: Task) -> Self {
        let (optimizer, batch_size, dropout) = match task {
            Task::Nli => (OptimizerConfig::Adam(AdamConfig::default()), 128, 0.5),
            Task::Sa => (OptimizerConfig::Adadelta(AdadeltaConfig::default()), 16, 0.0),
        };
        RunConfig {
            task,
            encoder: EncoderKind::Snelsd,
            joint_with: Joint::None,
            late_fusion: false,
            d_emb: 300,
            d_hidden: 300,
            d_compose: 300,
            mlp_hidden: None,
            reduce: None,
            optimizer,
            batch_size,
            epochs: 10,
            dropout,
            seed: 0,
            lowercase: false,
            trials: 1,
            train_path: None,
            dev_path: None,
            test_path: None,
            embeddings_path: None,
            out_dir: PathBuf::from("runs"),
        }
    }

    /// Reads a key-value TOML file. Keys not present take the defaults of
    /// the file's `task` (inference when absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        RunConfig::from_toml_str_for(text, None)
    }

    /// Like [`from_toml_str`](Self::from_toml_str), with `task` (when given)
    /// replacing the file's task before defaults are filled in.
    pub fn from_toml_str_for(text: &str, task: Option<Task>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        if let Some(t) = task {
            table.insert("task".into(), toml::Value::String(t.as_str().into()));
        }
        let task = match table.get("task") {
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::Config("task must be a string".into()))?
                .parse()?,
            None => Task::Nli,
        };
        let mut base = toml::Table::try_from(RunConfig::for_task(task))
            .map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in table {
            base.insert(k, v);
        }
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config file: {e}")))?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path, task: Option<Task>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        RunConfig::from_toml_str_for(&text, task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_with != Joint::None && !matches!(self.encoder, EncoderKind::Snelsd | EncoderKind::Lstm2) {
            return Err(Error::Config(format!(
                "joint_with = {} is only available with the snelsd and lstm2 encoders",
                self.joint_with
            )));
        }
        if self.late_fusion && (self.task != Task::Nli || self.joint_with != Joint::Blstm1) {
            return Err(Error::Config("late_fusion needs task = nli and joint_with = blstm1".into()));
        }
        if self.encoder == EncoderKind::Tree && self.joint_with != Joint::None {
            return Err(Error::Config("the tree encoder has no joint mode".into()));
        }
        for (name, v) in [("d_emb", self.d_emb), ("d_hidden", self.d_hidden), ("d_compose", self.d_compose)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Canonical JSON form, used for checkpoint headers and digests.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
