//! Command keys and their resolution. Every key can come from a `--key`
//! flag, a `key=value` line in the `--config` file or the built-in default,
//! in that order of precedence.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use swaplm_core::config::KvFile;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Default {
    Fixed(&'static str),
    Required,
    /// Absent unless given; the command falls back to its preset.
    Preset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Value,
    /// Boolean flag that takes no value on the command line.
    Switch,
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: Default,
    pub kind: Kind,
    pub help: &'static str,
}

const fn fixed(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Default::Fixed(default),
        kind: Kind::Value,
        help,
    }
}

const fn required(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Default::Required,
        kind: Kind::Value,
        help,
    }
}

const fn preset(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Default::Preset,
        kind: Kind::Value,
        help,
    }
}

pub const COMMON: &[Key] = &[
    fixed("seed", "0", "master seed"),
    fixed("threads", "0", "worker threads (0: all cores)"),
    fixed("out", "runs", "parent directory for run directories"),
    Key {
        name: "reference",
        default: Default::Fixed("false"),
        kind: Kind::Switch,
        help: "single-threaded, bit-reproducible path without wall-clock metrics",
    },
];

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
}

pub const GEN_CORPUS: CommandSpec = CommandSpec {
    name: "gen-corpus",
    about: "Write the seeded synthetic corpus (one document per line)",
    keys: &[
        fixed("classes", "8", "word classes"),
        fixed("words_per_class", "12", "words in each class per topic"),
        fixed("topics", "4", "document topics"),
        fixed("zipf_s", "1.1", "Zipf exponent within a class"),
        fixed("pool", "3", "candidate next classes per previous class"),
        fixed(
            "successors",
            "1",
            "allowed next classes per two-class context, drawn from the pool",
        ),
        fixed("min_words", "30", "shortest document"),
        fixed("max_words", "60", "longest document"),
        fixed("target_bytes", "1000000", "stop once the corpus reaches this size"),
    ],
};

pub const BUILD_VOCAB: CommandSpec = CommandSpec {
    name: "build-vocab",
    about: "Count whitespace tokens and write a frequency-ranked vocabulary",
    keys: &[
        required("corpus", "corpus file, one document per line"),
        fixed("max_size", "30000", "vocabulary size including specials"),
        fixed("min_freq", "1", "drop tokens seen fewer times"),
    ],
};

pub const TRAIN_EMBEDDINGS: CommandSpec = CommandSpec {
    name: "train-embeddings",
    about: "Train skip-gram embeddings with negative sampling",
    keys: &[
        required("corpus", "corpus file"),
        required("vocab", "vocabulary file"),
        fixed("dim", "64", "embedding width"),
        fixed("window", "5", "context window radius"),
        fixed("negatives", "5", "negative samples per pair"),
        fixed("epochs", "5", "passes over the corpus"),
        fixed("lr", "0.025", "initial learning rate"),
    ],
};

pub const CLUSTER: CommandSpec = CommandSpec {
    name: "cluster",
    about: "Cluster token embeddings with k-means",
    keys: &[
        required("embeddings", "embedding file"),
        required("vocab", "vocabulary file"),
        fixed("clusters", "100", "number of clusters"),
        fixed("max_iter", "100", "Lloyd iteration cap"),
    ],
};

pub const PRETRAIN: CommandSpec = CommandSpec {
    name: "pretrain",
    about: "Pre-train an encoder under one objective",
    keys: &[
        required("corpus", "corpus file"),
        required("vocab", "vocabulary file"),
        preset("clusters", "cluster file (required for crts)"),
        fixed("objective", "rts", "mlm, rts, crts, slm, slm_all or td_gen"),
        fixed("scale", "desk", "desk or base presets"),
        preset("steps", "total steps (one phase at max_len)"),
        preset("max_len", "sequence length (desk preset: 64)"),
        preset("layers", "encoder layers"),
        preset("hidden", "hidden size"),
        preset("heads", "attention heads"),
        preset("intermediate", "feed-forward size"),
        preset("head", "output head: binary or lm (must match the objective)"),
        preset("peak_lr", "peak learning rate"),
        preset("warmup_steps", "linear warm-up steps"),
        preset("batch_size", "sequences per batch"),
        preset("weight_decay", "decoupled weight decay"),
        preset("grad_clip", "global gradient-norm clip"),
        preset("replace_rate", "fraction of positions corrupted"),
        preset("log_every", "metrics interval"),
        preset("checkpoint_every", "checkpoint interval (0: final only)"),
        preset("eval_every", "held-out evaluation interval (0: off)"),
        preset("held_out_frac", "fraction of batches held out"),
        preset("disc_weight", "discriminator loss weight with a generator"),
        preset("gen_temperature", "generator sampling temperature"),
        preset("crts_gamma", "count-matrix sharpness"),
        preset("slm_all_source", "uniform or generator"),
        preset("resume", "checkpoint to continue from"),
    ],
};

pub const PROBE: CommandSpec = CommandSpec {
    name: "probe",
    about: "Compare detection of uniform and count-matrix replacements",
    keys: &[
        required("checkpoint", "checkpoint of a binary-head run"),
        required("corpus", "corpus the run was trained on"),
        required("vocab", "vocabulary file"),
        required("clusters", "cluster file"),
        fixed("passes", "1", "corruption passes over the held-out batches"),
    ],
};

pub const FLOPS: CommandSpec = CommandSpec {
    name: "flops",
    about: "Estimate training FLOPs of the compared setups",
    keys: &[
        fixed("scale", "base", "base or desk"),
        preset("vocab_size", "vocabulary size (desk preset: 1000)"),
        preset("steps", "desk steps (preset: 2000)"),
        preset("max_len", "desk sequence length (preset: 64)"),
        fixed(
            "generator_head",
            "all",
            "generator LM head at all or selected positions",
        ),
        fixed("backward_multiplier", "2", "backward cost relative to forward"),
    ],
};

pub const COMMANDS: &[&CommandSpec] = &[
    &GEN_CORPUS,
    &BUILD_VOCAB,
    &TRAIN_EMBEDDINGS,
    &CLUSTER,
    &PRETRAIN,
    &PROBE,
    &FLOPS,
];

pub fn cli() -> Command {
    let mut cmd = Command::new("swaplm")
        .about("Replaced-token pre-training experiments")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        let mut sub = Command::new(spec.name).about(spec.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key=value file; flags override it"),
        );
        for key in COMMON.iter().chain(spec.keys) {
            let mut help = key.help.to_string();
            if let Default::Fixed(d) = key.default {
                help.push_str(&format!(" [default: {d}]"));
            }
            let arg = Arg::new(key.name).long(key.name).help(help);
            sub = sub.arg(match key.kind {
                Kind::Value => arg.value_name("VALUE"),
                Kind::Switch => arg.action(ArgAction::SetTrue),
            });
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Resolved key values of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(spec: &CommandSpec, matches: &ArgMatches, config: Option<&KvFile>) -> Result<Self> {
        let keys: Vec<&Key> = COMMON.iter().chain(spec.keys).collect();
        if let Some(cfg) = config {
            let names: Vec<&str> = keys.iter().map(|k| k.name).collect();
            cfg.check_known(&names)?;
        }
        let mut values = BTreeMap::new();
        for key in keys {
            let from_flag = match key.kind {
                Kind::Value => matches.get_one::<String>(key.name).cloned(),
                Kind::Switch => (matches.value_source(key.name) == Some(ValueSource::CommandLine)
                    && matches.get_flag(key.name))
                .then(|| "true".to_string()),
            };
            let value = from_flag
                .or_else(|| config.and_then(|c| c.get(key.name)).map(str::to_string))
                .or(match key.default {
                    Default::Fixed(d) => Some(d.to_string()),
                    Default::Required | Default::Preset => None,
                });
            match value {
                Some(v) => {
                    values.insert(key.name.to_string(), v);
                }
                None if key.default == Default::Required => {
                    return Err(CliError::Config(format!("missing required key `{}`", key.name)));
                }
                None => {}
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::Config(format!("bad value `{v}` for `{key}`")))
            })
            .transpose()
    }

    /// Keys with a fixed default or marked required always resolve.
    pub fn req<T: FromStr>(&self, key: &str) -> Result<T> {
        self.opt(key)?
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    /// `key=value` text of every resolved key; feeding it back through
    /// `--config` reproduces the invocation.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        for (k, v) in &self.values {
            kv.set(k.clone(), v.clone());
        }
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(args: &[&str], config: Option<&str>) -> Result<Settings> {
        let m = cli().try_get_matches_from(args).unwrap();
        let (name, sub) = m.subcommand().unwrap();
        let spec = COMMANDS.iter().find(|s| s.name == name).unwrap();
        let kv = config.map(|t| KvFile::parse("test", t).unwrap());
        Settings::resolve(spec, sub, kv.as_ref())
    }

    #[test]
    fn flag_beats_config_beats_default() {
        let s = resolve(&["swaplm", "cluster", "--embeddings", "e", "--vocab", "v"], None).unwrap();
        assert_eq!(s.get("clusters"), Some("100"));
        let s = resolve(
            &["swaplm", "cluster", "--embeddings", "e", "--vocab", "v"],
            Some("clusters=7"),
        )
        .unwrap();
        assert_eq!(s.get("clusters"), Some("7"));
        let s = resolve(
            &[
                "swaplm",
                "cluster",
                "--embeddings",
                "e",
                "--vocab",
                "v",
                "--clusters",
                "9",
            ],
            Some("clusters=7"),
        )
        .unwrap();
        assert_eq!(s.get("clusters"), Some("9"));
    }

    #[test]
    fn switches_and_presets() {
        let s = resolve(&["swaplm", "flops"], Some("reference=true")).unwrap();
        assert_eq!(s.get("reference"), Some("true"));
        assert_eq!(s.get("steps"), None);
        let s = resolve(&["swaplm", "flops", "--reference"], Some("reference=false")).unwrap();
        assert!(s.req::<bool>("reference").unwrap());
    }

    #[test]
    fn unknown_and_missing_keys() {
        assert!(matches!(
            resolve(&["swaplm", "flops"], Some("bogus=1")),
            Err(CliError::Core(_))
        ));
        assert!(matches!(
            resolve(&["swaplm", "cluster"], None),
            Err(CliError::Config(_))
        ));
        assert!(cli().try_get_matches_from(["swaplm", "flops", "--bogus", "1"]).is_err());
    }
}
