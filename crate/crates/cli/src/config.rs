//! `key = value` run configuration shared by every command.

use std::fmt;
use std::str::FromStr;

use star_core::net::NetworkConfig;
use star_core::pipeline::AugmentConfig;
use star_core::synth::{SynthConfig, SyntheticAction};
use star_core::train::TrainConfig;

use crate::error::CliError;

/// Comma-separated names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct List(pub Vec<String>);

impl FromStr for List {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(List(
            s.split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(String::from)
                .collect(),
        ))
    }
}

impl fmt::Display for List {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    Reference,
    Compact,
    Shallow,
}

impl FromStr for NetworkKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reference" => Ok(NetworkKind::Reference),
            "compact" => Ok(NetworkKind::Compact),
            "shallow" => Ok(NetworkKind::Shallow),
            _ => Err(format!("unknown network {s:?} (reference, compact, shallow)")),
        }
    }
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetworkKind::Reference => "reference",
            NetworkKind::Compact => "compact",
            NetworkKind::Shallow => "shallow",
        })
    }
}

/// Which cross-subject partition a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(format!("unknown split {s:?} (train, test, all)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("bad value {value:?} for `{key}`: {e}")))
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident: $ty:ty = $default:expr;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key {
                    $(stringify!($key) => self.$key = parse_value(key, value)?,)*
                    _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string()),)*]
            }
        }
    };
}

run_config! {
    seed: u64 = 0;
    /// Dataset manifest; clips live in `clips/` beside it.
    manifest: String = "data/manifest.txt".into();
    classes: List = List(SyntheticAction::ALL.iter().map(|a| a.name().to_string()).collect());
    subjects: u16 = 8;
    repetitions: u16 = 4;
    min_frames: usize = 20;
    max_frames: usize = 60;
    sigma: f64 = 2.0;
    network: NetworkKind = NetworkKind::Compact;
    dropout: f64 = 0.5;
    iterations: usize = 1000;
    batch_size: usize = 32;
    window: usize = 32;
    learning_rate: f64 = 1e-3;
    rotation_degrees: f64 = 15.0;
    rotation_prob: f64 = 0.5;
    flip_prob: f64 = 0.5;
    bn_batches: usize = star_core::train::DEFAULT_BN_RECALIBRATION_BATCHES;
    checkpoint: String = "star.ckpt".into();
    history: String = "history.jsonl".into();
    split: Split = Split::Test;
    report: String = "eval.jsonl".into();
    trials: usize = 1000;
    warmup: usize = 10;
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies command-line `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {o:?} is not `key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// The resolved config, in config-file syntax.
    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn actions(&self) -> Result<Vec<SyntheticAction>, CliError> {
        if self.classes.0.is_empty() {
            return Err(CliError::Usage("`classes` lists no action classes".into()));
        }
        self.classes
            .0
            .iter()
            .map(|n| {
                SyntheticAction::from_name(n).ok_or_else(|| {
                    let known: Vec<&str> = SyntheticAction::ALL.iter().map(|a| a.name()).collect();
                    CliError::Usage(format!("unknown action class {n:?} (known: {})", known.join(", ")))
                })
            })
            .collect()
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        if self.min_frames > self.max_frames {
            return Err(CliError::Usage(format!(
                "min_frames {} exceeds max_frames {}",
                self.min_frames, self.max_frames
            )));
        }
        Ok(SynthConfig {
            actions: self.actions()?,
            subjects: self.subjects,
            repetitions: self.repetitions,
            frames: self.min_frames..=self.max_frames,
            sigma: self.sigma,
            seed: self.seed,
            ..SynthConfig::default()
        })
    }

    pub fn network(&self, num_classes: usize) -> NetworkConfig {
        let base = match self.network {
            NetworkKind::Reference => NetworkConfig::reference(num_classes),
            NetworkKind::Compact => NetworkConfig::compact(num_classes),
            NetworkKind::Shallow => NetworkConfig::shallow(num_classes),
        };
        NetworkConfig {
            window: self.window,
            dropout_rate: self.dropout,
            seed: self.seed,
            ..base
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            window: self.window,
            learning_rate: self.learning_rate,
            augment: AugmentConfig {
                rotation_degrees: self.rotation_degrees,
                rotation_prob: self.rotation_prob,
                flip_prob: self.flip_prob,
                ..AugmentConfig::default()
            },
            seed: self.seed,
            bn_recalibration_batches: self.bn_batches,
        }
    }
}
