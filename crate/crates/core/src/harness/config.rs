//! Run configuration and its `key = value` text format.
//!
//! A config file is a list of `key = value` lines; `#` starts a comment and
//! blank lines are ignored. Every key is optional and listed in
//! [`schema`] with its type and default. Unknown or repeated keys are
//! errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::error::{Error, Result};
use crate::losses::{ContrastForm, MemClrConfig};
use crate::streamsim::{parse_shift_list, DomainSpec, ShiftSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    Online,
    Offline { epochs: usize },
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub adapt: AdaptConfig,
    pub domain: DomainSpec,
    pub shift: ShiftSpec,
    pub mode: RunMode,
    pub feature_dim: usize,
    pub stream_length: usize,
    pub order_seed: u64,
    /// Std of the Gaussian jitter that turns a weak view into a strong one.
    pub jitter_std: f64,
    pub source_size: usize,
    pub holdout_size: usize,
    pub source_epochs: usize,
    pub source_lr: f64,
    pub source_momentum: f64,
    pub offline_train_fraction: f64,
    /// Score the student instead of the teacher.
    pub eval_student: bool,
}

/// Seeds derived from [`RunConfig::seed`] for each random component.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Seeds {
    pub model: u64,
    pub source_order: u64,
    pub projections: u64,
    pub memory: u64,
    pub split: u64,
    pub epoch_order: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RunConfig {
    /// The default benchmark for one seed: two classes in `R^8`, rotation by
    /// 45° plus noise σ = 0.2, a 500-sample online stream. Uses a student
    /// learning rate of 0.003 and one source epoch; see the README.
    pub fn benchmark(seed: u64) -> Self {
        Settings::default()
            .with("seed", seed.to_string())
            .build()
            .expect("defaults are valid")
    }

    pub(crate) fn seeds(&self) -> Seeds {
        let s = |tag: u64| splitmix(self.seed ^ splitmix(tag));
        Seeds {
            model: s(1),
            source_order: s(2),
            projections: s(3),
            memory: s(4),
            split: s(5),
            epoch_order: s(6),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        self.domain.validate()?;
        let fail = |msg: String| Err(Error::invalid(msg));
        if self.feature_dim == 0 {
            return fail("feature_dim must be >= 1".into());
        }
        if let RunMode::Offline { epochs: 0 } = self.mode {
            return fail("offline mode needs epochs >= 1".into());
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return fail(format!("jitter_std must be >= 0, got {}", self.jitter_std));
        }
        if self.source_size == 0 || self.holdout_size == 0 {
            return fail("source_size and holdout_size must be >= 1".into());
        }
        if !(self.source_lr > 0.0 && self.source_lr.is_finite()) || !(0.0..1.0).contains(&self.source_momentum) {
            return fail(format!(
                "source optimizer needs lr > 0 and momentum in [0, 1), got {} / {}",
                self.source_lr, self.source_momentum
            ));
        }
        if !(self.offline_train_fraction > 0.0 && self.offline_train_fraction < 1.0) {
            return fail(format!("offline_train_fraction must lie in (0, 1), got {}", self.offline_train_fraction));
        }
        Ok(())
    }
}

/// One documented config key.
#[derive(Debug, Clone, Copy)]
pub struct SchemaEntry {
    pub key: &'static str,
    pub kind: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn entry(key: &'static str, kind: &'static str, default: &'static str, help: &'static str) -> SchemaEntry {
    SchemaEntry { key, kind, default, help }
}

static SCHEMA: &[SchemaEntry] = &[
    entry("seed", "u64", "0", "master seed: domain, shift, model init, memory, splits"),
    entry("n_classes", "usize", "2", "number of classes K"),
    entry("input_dim", "usize", "8", "raw instance dimension D"),
    entry("feature_dim", "usize", "16", "feature / memory item dimension C"),
    entry("domain_offset", "f64", "0.95", "distance of the class centroid from the origin"),
    entry("domain_separation", "f64", "1.0", "distance of each class mean from the centroid"),
    entry("class_std", "f64", "0.35", "isotropic per-class standard deviation"),
    entry("min_instances", "usize", "1", "fewest instances per stream sample"),
    entry("max_instances", "usize", "5", "most instances per stream sample"),
    entry("shift", "shift list", "rotation:45,noise:0.2", "comma list of rotation:DEG | translation:X0;X1;.. | noise:SIGMA | scale:F, or none"),
    entry("stream_length", "usize", "500", "number of target samples"),
    entry("order_seed", "u64", "seed", "permutation of the target stream"),
    entry("jitter_std", "f64", "0.1", "strong-view jitter std"),
    entry("source_size", "usize", "2000", "source training instances"),
    entry("holdout_size", "usize", "1000", "source holdout instances"),
    entry("source_epochs", "usize", "1", "source training epochs (>= 1)"),
    entry("source_lr", "f64", "0.001", "source SGD learning rate"),
    entry("source_momentum", "f64", "0.9", "source SGD momentum"),
    entry("alpha", "f64", "0.99", "teacher EMA rate in [0, 1]"),
    entry("gamma", "f64", "0.003", "student learning rate (0 freezes the student)"),
    entry("mu", "f64", "0.9", "student SGD momentum in [0, 1)"),
    entry("conf_threshold", "f64", "0.9", "pseudo-label confidence threshold, strict >"),
    entry("n_memory", "usize", "1024", "memory items N_l"),
    entry("neg_ratio", "f64", "0.1", "fraction of least-attended items mined as negatives"),
    entry("temperature", "f64", "1.0", "contrastive temperature"),
    entry("normalize_features", "bool", "true", "cosine instead of raw dot-product similarity"),
    entry("contrast_form", "log-of-mean|mean-of-log", "log-of-mean", "aggregation over anchors"),
    entry("use_memclr", "bool", "true", "false runs the plain student-teacher baseline"),
    entry("tie_write_projections", "bool", "false", "EMA-tie W_k and W_v to the trained W_q"),
    entry("mode", "online|offline", "online", "adaptation mode"),
    entry("epochs", "usize", "1", "passes over the target train split in offline mode"),
    entry("offline_train_fraction", "f64", "0.8", "share of target samples used for offline adaptation"),
    entry("eval_student", "bool", "false", "evaluate the student instead of the teacher"),
];

pub fn schema() -> &'static [SchemaEntry] {
    SCHEMA
}

/// Human-readable listing of every key.
pub fn print_schema() -> String {
    let mut out = String::from("# memx run config: one `key = value` per line, `#` comments\n");
    for e in SCHEMA {
        let _ = writeln!(out, "# {} ({}): {}", e.key, e.kind, e.help);
        let _ = writeln!(out, "{} = {}", e.key, e.default);
    }
    out
}

/// Layered `key = value` settings on top of the schema defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses a config file's text. Keys must be known and unique.
    pub fn parse(text: &str) -> Result<Self> {
        let mut settings = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if settings.values.contains_key(k) {
                return Err(Error::format("config", format!("line {}: duplicate key `{k}`", n + 1)));
            }
            settings.set(k, v.trim())?;
        }
        Ok(settings)
    }

    /// Sets (or overrides) one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !SCHEMA.iter().any(|e| e.key == key) {
            return Err(Error::invalid(format!("unknown config key `{key}` (see the printed schema)")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.set(key, &value.into()).expect("known key");
        self
    }

    /// Parses and applies `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override `{assignment}` must look like key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Later settings win.
    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    fn raw(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => SCHEMA.iter().find(|e| e.key == key).expect("schema key").default,
        }
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Error::invalid(format!("config key `{key}`: cannot parse `{raw}`: {e}")))
    }

    pub fn build(&self) -> Result<RunConfig> {
        let seed: u64 = self.get("seed")?;
        let order_seed = match self.raw("order_seed") {
            "seed" => seed,
            _ => self.get("order_seed")?,
        };
        let mut domain = DomainSpec::gaussian(
            self.get("n_classes")?,
            self.get("input_dim")?,
            self.get("domain_offset")?,
            self.get("domain_separation")?,
            self.get("class_std")?,
            seed,
        )?;
        domain.min_instances = self.get("min_instances")?;
        domain.max_instances = self.get("max_instances")?;
        let shift = ShiftSpec {
            shifts: parse_shift_list(self.raw("shift"))?,
            seed,
        };
        let form = match self.raw("contrast_form") {
            "log-of-mean" => ContrastForm::LogOfMean,
            "mean-of-log" => ContrastForm::MeanOfLog,
            other => return Err(Error::invalid(format!("contrast_form must be log-of-mean or mean-of-log, got `{other}`"))),
        };
        let mode = match self.raw("mode") {
            "online" => RunMode::Online,
            "offline" => RunMode::Offline {
                epochs: self.get("epochs")?,
            },
            other => return Err(Error::invalid(format!("mode must be online or offline, got `{other}`"))),
        };
        let adapt = AdaptConfig {
            alpha: self.get("alpha")?,
            gamma: self.get("gamma")?,
            mu: self.get("mu")?,
            conf_threshold: self.get("conf_threshold")?,
            n_memory: self.get("n_memory")?,
            neg_ratio: self.get("neg_ratio")?,
            memclr: MemClrConfig {
                temperature: self.get("temperature")?,
                normalize_features: self.get("normalize_features")?,
                form,
            },
            use_memclr: self.get("use_memclr")?,
            tie_write_projections: self.get("tie_write_projections")?,
        };
        let config = RunConfig {
            seed,
            adapt,
            domain,
            shift,
            mode,
            feature_dim: self.get("feature_dim")?,
            stream_length: self.get("stream_length")?,
            order_seed,
            jitter_std: self.get("jitter_std")?,
            source_size: self.get("source_size")?,
            holdout_size: self.get("holdout_size")?,
            source_epochs: self.get("source_epochs")?,
            source_lr: self.get("source_lr")?,
            source_momentum: self.get("source_momentum")?,
            offline_train_fraction: self.get("offline_train_fraction")?,
            eval_student: self.get("eval_student")?,
        };
        config.validate()?;
        Ok(config)
    }
}
