//! TOML configuration documents and built-in presets.
//!
//! Sections: `run` (with an optional `run.task` table), `roulette`,
//! `optimizers.<id>`, `suite`, `milestones`. Unknown keys are errors and
//! omitted keys keep their defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::controller::RouletteConfig;
use crate::error::{Error, Result};
use crate::harness::{ClockMode, Mode, RunConfig, TaskConfig};
use crate::optim::{Hyper, OptimizerId};
use crate::suite::{default_seed_table, SeedEntry, SuiteConfig};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    #[serde(default)]
    pub run: RunSection,
    pub roulette: Option<RouletteConfig>,
    #[serde(default)]
    pub optimizers: BTreeMap<OptimizerId, OptimizerSection>,
    #[serde(default)]
    pub suite: SuiteSection,
    #[serde(default)]
    pub milestones: MilestoneSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub mode: Option<Mode>,
    pub simple_optimizer: Option<OptimizerId>,
    pub max_epochs: Option<u32>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub clip_max_norm: Option<f64>,
    pub clock: Option<ClockMode>,
    pub task: Option<TaskConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub beta3: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub momentum_decay: Option<f64>,
    pub lookahead_k: Option<u32>,
    pub lookahead_alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub name: Option<String>,
    pub dataset: Option<String>,
    pub modes: Option<Vec<Mode>>,
    pub jobs: Option<usize>,
    pub seeds: Option<Vec<SeedEntry>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilestoneSection {
    pub targets: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// Full protocol: ten seeds, 100 epochs.
    #[default]
    Reference,
    /// Five seeds, 60 epochs on 8-class blobs.
    Demo,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Preset::Reference),
            "demo" => Ok(Preset::Demo),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected reference or demo)"
            ))),
        }
    }
}

/// Everything a command needs, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub suite: SuiteConfig,
    pub jobs: usize,
}

impl LoadedConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Reference => {
                let run = RunConfig::default();
                LoadedConfig {
                    suite: SuiteConfig {
                        template: run.clone(),
                        ..SuiteConfig::default()
                    },
                    run,
                    jobs: 1,
                }
            }
            Preset::Demo => {
                let run = RunConfig {
                    max_epochs: 60,
                    task: TaskConfig {
                        samples: 8000,
                        features: 32,
                        classes: 8,
                        ..TaskConfig::default()
                    },
                    ..RunConfig::default()
                };
                LoadedConfig {
                    suite: SuiteConfig {
                        name: "demo".to_string(),
                        dataset: "blobs8".to_string(),
                        seeds: default_seed_table().into_iter().take(5).collect(),
                        template: run.clone(),
                        ..SuiteConfig::default()
                    },
                    run,
                    jobs: 1,
                }
            }
        }
    }

    /// Layers a parsed document over this configuration and validates.
    pub fn apply(mut self, doc: ConfigDocument) -> Result<Self> {
        let run = &mut self.run;
        let r = doc.run;
        if let Some(v) = r.mode {
            run.mode = v;
        }
        if let Some(v) = r.simple_optimizer {
            run.simple_optimizer = v;
        }
        if let Some(v) = r.max_epochs {
            run.max_epochs = v;
        }
        if let Some(v) = r.batch_size {
            run.batch_size = v;
        }
        if let Some(v) = r.seed {
            run.seed = v;
        }
        if let Some(v) = r.clip_max_norm {
            run.clip_max_norm = v;
        }
        if let Some(v) = r.clock {
            run.clock = v;
        }
        if let Some(v) = r.task {
            run.task = v;
        }
        if let Some(v) = doc.roulette {
            run.roulette = v;
        }
        for (id, section) in doc.optimizers {
            if let Some(lr) = section.lr {
                run.lrs.set(id, lr)?;
            }
            let h = run.hypers.entry(id).or_insert_with(|| Hyper::defaults(id));
            let fields = [
                (section.beta1, &mut h.beta1),
                (section.beta2, &mut h.beta2),
                (section.beta3, &mut h.beta3),
                (section.eps, &mut h.eps),
                (section.weight_decay, &mut h.weight_decay),
                (section.momentum, &mut h.momentum),
                (section.momentum_decay, &mut h.momentum_decay),
                (section.lookahead_alpha, &mut h.lookahead_alpha),
            ];
            for (value, slot) in fields {
                if let Some(v) = value {
                    *slot = v;
                }
            }
            if let Some(k) = section.lookahead_k {
                h.lookahead_k = k;
            }
            validate_hyper(id, h)?;
        }
        if let Some(t) = doc.milestones.targets {
            run.milestone_targets = t;
        }

        let s = doc.suite;
        if let Some(v) = s.name {
            self.suite.name = v;
        }
        if let Some(v) = s.dataset {
            self.suite.dataset = v;
        }
        if let Some(v) = s.modes {
            self.suite.modes = v;
        }
        if let Some(v) = s.seeds {
            self.suite.seeds = v;
        }
        if let Some(v) = s.jobs {
            if v == 0 {
                return Err(Error::config("suite.jobs", "must be at least 1"));
            }
            self.jobs = v;
        }
        self.sync();
        self.validate()?;
        Ok(self)
    }

    /// Copies the run settings into the suite template.
    pub fn sync(&mut self) {
        self.suite.template = self.run.clone();
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.suite.validate()
    }
}

fn validate_hyper(id: OptimizerId, h: &Hyper) -> Result<()> {
    let key = |k: &str| format!("optimizers.{id}.{k}");
    for (name, v) in [
        ("beta1", h.beta1),
        ("beta2", h.beta2),
        ("beta3", h.beta3),
        ("momentum", h.momentum),
    ] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::config(
                key(name),
                format!("must lie in [0, 1), got {v}"),
            ));
        }
    }
    if !(h.eps > 0.0 && h.eps.is_finite()) {
        return Err(Error::config(key("eps"), "must be positive"));
    }
    if !(h.weight_decay >= 0.0 && h.weight_decay.is_finite()) {
        return Err(Error::config(key("weight_decay"), "must be non-negative"));
    }
    if !(h.momentum_decay >= 0.0 && h.momentum_decay.is_finite()) {
        return Err(Error::config(key("momentum_decay"), "must be non-negative"));
    }
    if h.lookahead_k == 0 {
        return Err(Error::config(key("lookahead_k"), "must be at least 1"));
    }
    if !(h.lookahead_alpha > 0.0 && h.lookahead_alpha <= 1.0) {
        return Err(Error::config(key("lookahead_alpha"), "must lie in (0, 1]"));
    }
    Ok(())
}

pub fn parse_document(text: &str, origin: &Path) -> Result<ConfigDocument> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a config file (or nothing) over a preset.
pub fn load_config(path: Option<&Path>, preset: Preset) -> Result<LoadedConfig> {
    let base = LoadedConfig::preset(preset);
    match path {
        None => base.apply(ConfigDocument::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            base.apply(parse_document(&text, p)?)
        }
    }
}
