//! Flat `key = value` experiment configs with `[section]` headers.
//!
//! Top-level keys: `kind`, `seeds`, `output`, `plot`. Sections: `[domain]`,
//! `[darc]`, `[net]`, `[archery]`, `[theory]`. Unknown sections and keys are
//! errors; every key has a default, so an empty file is a valid config for
//! DARC on the wall gridworld. `#` starts a comment.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use darc_core::correction::NetConfig;
use darc_core::darc::presets::{self, GridKind, Preset};
use darc_core::darc::{ArcheryConfig, ClassifierKind, CollectPolicy, CorrectionMode, DarcConfig};
use darc_core::domains::{Cell, GridworldSpec};
use darc_core::maxent::QInit;
use darc_core::theory::InstanceLimits;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in {section}")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Darc,
    RlSource,
    RlTarget,
    Importance,
    AblationSingleClassifier,
    MatlStyle,
    ArcherySweep,
    TheorySuite,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Darc,
        ExperimentKind::RlSource,
        ExperimentKind::RlTarget,
        ExperimentKind::Importance,
        ExperimentKind::AblationSingleClassifier,
        ExperimentKind::MatlStyle,
        ExperimentKind::ArcherySweep,
        ExperimentKind::TheorySuite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Darc => "darc",
            ExperimentKind::RlSource => "rl_source",
            ExperimentKind::RlTarget => "rl_target",
            ExperimentKind::Importance => "importance",
            ExperimentKind::AblationSingleClassifier => "ablation_single_classifier",
            ExperimentKind::MatlStyle => "matl_style",
            ExperimentKind::ArcherySweep => "archery_sweep",
            ExperimentKind::TheorySuite => "theory_suite",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown experiment kind `{s}`"))
    }
}

/// Classifier family, with its settings kept separately so that switching
/// families does not lose them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierChoice {
    Tabular,
    Net,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheorySettings {
    pub instances: usize,
    pub limits: InstanceLimits,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self { instances: 200, limits: InstanceLimits::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    /// Relative to the output root.
    pub output: PathBuf,
    pub plot: bool,
    pub grid: GridKind,
    pub spec: GridworldSpec,
    /// Loop settings; `classifier`, `seed` and `success_states` are filled
    /// in per run from the fields below and the domain.
    pub darc: DarcConfig,
    pub classifier: ClassifierChoice,
    pub smoothing: f64,
    pub net: NetConfig,
    pub archery: ArcheryConfig,
    pub theory: TheorySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Darc,
            seeds: vec![0, 1, 2],
            output: PathBuf::from("results"),
            plot: true,
            grid: GridKind::Wall,
            spec: GridworldSpec::wall_default(),
            darc: DarcConfig::default(),
            classifier: ClassifierChoice::Tabular,
            smoothing: 0.5,
            net: NetConfig::default(),
            archery: ArcheryConfig::default(),
            theory: TheorySettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults with outputs in a directory named after the kind.
    pub fn for_kind(kind: ExperimentKind) -> Self {
        Self { kind, output: PathBuf::from(kind.name()), ..Self::default() }
    }

    /// Config that reproduces `preset` for every seed in `seeds`.
    pub fn from_preset(kind: ExperimentKind, preset: &Preset, seeds: Vec<u64>) -> Self {
        let mut cfg = Self::for_kind(kind);
        cfg.seeds = seeds;
        cfg.grid = preset.kind;
        cfg.spec = preset.spec.clone();
        cfg.darc = DarcConfig { success_states: Vec::new(), classifier: DarcConfig::default().classifier, ..preset.config.clone() };
        match &preset.config.classifier {
            ClassifierKind::Tabular { smoothing } => {
                cfg.classifier = ClassifierChoice::Tabular;
                cfg.smoothing = *smoothing;
            }
            ClassifierKind::Net(net) => {
                cfg.classifier = ClassifierChoice::Net;
                cfg.net = net.clone();
            }
            ClassifierKind::Oracle => cfg.classifier = ClassifierChoice::Oracle,
        }
        cfg
    }

    /// Loop config for one seed, success defined as reaching the goal.
    pub fn darc_config(&self, seed: u64) -> DarcConfig {
        let classifier = match self.classifier {
            ClassifierChoice::Tabular => ClassifierKind::Tabular { smoothing: self.smoothing },
            ClassifierChoice::Net => ClassifierKind::Net(self.net.clone()),
            ClassifierChoice::Oracle => ClassifierKind::Oracle,
        };
        DarcConfig { classifier, seed, success_states: vec![self.spec.goal_state()], ..self.darc.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        match self.kind {
            ExperimentKind::ArcherySweep => {
                self.archery.spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                self.archery.net.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if self.archery.grid_points == 0 || self.archery.objective_samples == 0 || self.archery.episodes_per_domain == 0 {
                    return bad("archery grid, samples and episodes must be positive".into());
                }
            }
            ExperimentKind::TheorySuite => {
                let l = self.theory.limits;
                if l.max_states < 2 || l.max_actions == 0 || l.max_horizon == 0 {
                    return bad("theory limits need at least 2 states, 1 action and horizon 1".into());
                }
            }
            _ => {
                let pair = self.grid.build(&self.spec).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                self.darc_config(self.seeds[0]).validate(&pair).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if self.classifier == ClassifierChoice::Tabular && !(self.smoothing > 0.0) {
                    return bad("smoothing must be positive".into());
                }
                if self.classifier == ClassifierChoice::Net {
                    self.net.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

/// Tuned gridworld presets by name.
pub fn preset_by_name(name: &str) -> Option<Preset> {
    Some(match name {
        "wall_transfer" => presets::wall_transfer(),
        "wall_skewed" => presets::wall_skewed(),
        "wall_warmup" => presets::wall_warmup(),
        "flip_transfer" => presets::flip_transfer(),
        "flip_matl" => presets::flip_matl(),
        _ => return None,
    })
}

pub const PRESET_NAMES: [&str; 5] = ["wall_transfer", "wall_skewed", "wall_warmup", "flip_transfer", "flip_matl"];

const SECTIONS: [&str; 6] = ["", "domain", "darc", "net", "archery", "theory"];

fn keys(section: &str) -> &'static [&'static str] {
    match section {
        "" => &["kind", "seeds", "output", "plot"],
        "domain" => &[
            "grid", "width", "height", "start", "goal", "walls", "flip", "slip_prob", "goal_reward", "step_reward", "horizon",
        ],
        "darc" => &[
            "num_iterations",
            "target_collect_period",
            "warmup_iters",
            "classifier",
            "smoothing",
            "correction",
            "clamp",
            "alpha0",
            "tau",
            "q_init",
            "rl_batch_size",
            "rl_updates_per_iter",
            "update_multiplier",
            "classifier_updates_per_iter",
            "source_collect",
            "target_collect",
            "buffer_capacity",
            "eval_every",
            "eval_episodes",
            "finetune_source_iters",
            "record_timing",
        ],
        "net" => {
            &["hidden", "noise_std", "learning_rate", "batch_size", "steps", "standardize", "beta1", "beta2", "epsilon"]
        }
        "archery" => &[
            "episodes_per_domain",
            "grid_points",
            "objective_samples",
            "clamp",
            "target_distance",
            "source_wind_mean",
            "source_wind_std",
            "target_wind_mean",
            "target_wind_std",
            "angle_min",
            "angle_max",
            "hidden",
            "noise_std",
            "learning_rate",
            "batch_size",
            "steps",
            "standardize",
        ],
        "theory" => &["instances", "max_states", "max_actions", "max_horizon"],
        _ => &[],
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, msg: impl Into<String>) -> ConfigError {
        ConfigError::Value { line: self.line, key: self.key.to_string(), msg: msg.into() }
    }

    fn parse<T: FromStr>(&self) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| self.err(e.to_string()))
    }

    fn list<T: FromStr>(&self) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if self.value.is_empty() {
            return Ok(Vec::new());
        }
        self.value.split(',').map(|p| p.trim().parse().map_err(|e: T::Err| self.err(e.to_string()))).collect()
    }

    fn optional<T: FromStr>(&self) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if self.value == "none" {
            Ok(None)
        } else {
            self.parse().map(Some)
        }
    }

    fn cell(&self) -> Result<Cell, ConfigError> {
        parse_cell(self.value).ok_or_else(|| self.err("expected `row,col`"))
    }
}

fn parse_cell(s: &str) -> Option<Cell> {
    let (r, c) = s.split_once(',')?;
    Some(Cell::new(r.trim().parse().ok()?, c.trim().parse().ok()?))
}

fn parse_collect(e: &Entry) -> Result<CollectPolicy, ConfigError> {
    let mut parts = e.value.split_whitespace();
    match parts.next() {
        Some("current") => Ok(CollectPolicy::Current),
        Some("uniform") => Ok(CollectPolicy::Uniform),
        Some("skewed") => {
            let action = parts.next().and_then(|a| a.parse().ok()).ok_or_else(|| e.err("expected `skewed <action> <prob>`"))?;
            let prob = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| e.err("expected `skewed <action> <prob>`"))?;
            Ok(CollectPolicy::Skewed { action, prob })
        }
        _ => Err(e.err("expected current, uniform or skewed <action> <prob>")),
    }
}

fn emit_collect(c: CollectPolicy) -> String {
    match c {
        CollectPolicy::Current => "current".into(),
        CollectPolicy::Uniform => "uniform".into(),
        CollectPolicy::Skewed { action, prob } => format!("skewed {action} {prob}"),
    }
}

fn emit_optional<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or("none".into(), |x| x.to_string())
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn apply_net(net: &mut NetConfig, e: &Entry) -> Result<(), ConfigError> {
    match e.key {
        "hidden" => net.hidden = e.list()?,
        "noise_std" => net.noise_std = e.parse()?,
        "learning_rate" => net.learning_rate = e.parse()?,
        "batch_size" => net.batch_size = e.parse()?,
        "steps" => net.steps = e.parse()?,
        "standardize" => net.standardize = e.parse()?,
        "beta1" => net.beta1 = e.parse()?,
        "beta2" => net.beta2 = e.parse()?,
        "epsilon" => net.epsilon = e.parse()?,
        _ => unreachable!("key table and setters agree"),
    }
    Ok(())
}

fn apply(cfg: &mut ExperimentConfig, section: &str, e: &Entry) -> Result<(), ConfigError> {
    match (section, e.key) {
        ("", "kind") => cfg.kind = e.value.parse().map_err(|m: String| e.err(m))?,
        ("", "seeds") => cfg.seeds = e.list()?,
        ("", "output") => cfg.output = PathBuf::from(e.value),
        ("", "plot") => cfg.plot = e.parse()?,

        ("domain", "grid") => {
            cfg.grid = match e.value {
                "wall" => GridKind::Wall,
                "flip" => GridKind::Flip,
                _ => return Err(e.err("expected wall or flip")),
            };
            // switching layouts resets the layout-specific fields
            let fresh = match cfg.grid {
                GridKind::Wall => GridworldSpec::wall_default(),
                GridKind::Flip => GridworldSpec::flip_default(),
            };
            cfg.spec = GridworldSpec {
                slip_prob: cfg.spec.slip_prob,
                goal_reward: cfg.spec.goal_reward,
                step_reward: cfg.spec.step_reward,
                horizon: cfg.spec.horizon,
                ..fresh
            };
        }
        ("domain", "width") => cfg.spec.width = e.parse()?,
        ("domain", "height") => cfg.spec.height = e.parse()?,
        ("domain", "start") => cfg.spec.start = e.cell()?,
        ("domain", "goal") => cfg.spec.goal = e.cell()?,
        ("domain", "walls") => {
            cfg.spec.wall_cells = e
                .value
                .split(';')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| parse_cell(p).ok_or_else(|| e.err("expected `row,col; row,col; ...`")))
                .collect::<Result<_, _>>()?;
        }
        ("domain", "flip") => {
            cfg.spec.flip_cell = if e.value == "none" { None } else { Some(e.cell()?) };
        }
        ("domain", "slip_prob") => cfg.spec.slip_prob = e.parse()?,
        ("domain", "goal_reward") => cfg.spec.goal_reward = e.parse()?,
        ("domain", "step_reward") => cfg.spec.step_reward = e.parse()?,
        ("domain", "horizon") => cfg.spec.horizon = e.parse()?,

        ("darc", "num_iterations") => cfg.darc.num_iterations = e.parse()?,
        ("darc", "target_collect_period") => {
            let r: usize = e.parse()?;
            if r == 0 {
                return Err(e.err("must be at least 1"));
            }
            cfg.darc.target_collect_period = r;
        }
        ("darc", "warmup_iters") => cfg.darc.warmup_iters = e.parse()?,
        ("darc", "classifier") => {
            cfg.classifier = match e.value {
                "tabular" => ClassifierChoice::Tabular,
                "net" => ClassifierChoice::Net,
                "oracle" => ClassifierChoice::Oracle,
                _ => return Err(e.err("expected tabular, net or oracle")),
            }
        }
        ("darc", "smoothing") => cfg.smoothing = e.parse()?,
        ("darc", "correction") => {
            cfg.darc.correction = match e.value {
                "full" => CorrectionMode::Full,
                "sas_only" => CorrectionMode::SasOnly,
                "action_unconditioned" => CorrectionMode::ActionUnconditioned,
                _ => return Err(e.err("expected full, sas_only or action_unconditioned")),
            }
        }
        ("darc", "clamp") => cfg.darc.clamp_bound = e.optional()?,
        ("darc", "alpha0") => cfg.darc.schedule.alpha0 = e.parse()?,
        ("darc", "tau") => cfg.darc.schedule.tau = e.parse()?,
        ("darc", "q_init") => {
            cfg.darc.q_init = match e.value {
                "entropy_prior" => QInit::EntropyPrior,
                "zero" => QInit::Zero,
                _ => return Err(e.err("expected entropy_prior or zero")),
            }
        }
        ("darc", "rl_batch_size") => cfg.darc.rl_batch_size = e.parse()?,
        ("darc", "rl_updates_per_iter") => cfg.darc.rl_updates_per_iter = e.parse()?,
        ("darc", "update_multiplier") => cfg.darc.update_multiplier = e.parse()?,
        ("darc", "classifier_updates_per_iter") => cfg.darc.classifier_updates_per_iter = e.parse()?,
        ("darc", "source_collect") => cfg.darc.source_collect = parse_collect(e)?,
        ("darc", "target_collect") => cfg.darc.target_collect = parse_collect(e)?,
        ("darc", "buffer_capacity") => cfg.darc.buffer_capacity = e.optional()?,
        ("darc", "eval_every") => cfg.darc.eval_every = e.parse()?,
        ("darc", "eval_episodes") => cfg.darc.eval_episodes = e.parse()?,
        ("darc", "finetune_source_iters") => cfg.darc.finetune_source_iters = e.parse()?,
        ("darc", "record_timing") => cfg.darc.record_timing = e.parse()?,

        ("net", _) => apply_net(&mut cfg.net, e)?,

        ("archery", "episodes_per_domain") => cfg.archery.episodes_per_domain = e.parse()?,
        ("archery", "grid_points") => cfg.archery.grid_points = e.parse()?,
        ("archery", "objective_samples") => cfg.archery.objective_samples = e.parse()?,
        ("archery", "clamp") => cfg.archery.clamp = e.optional()?,
        ("archery", "target_distance") => cfg.archery.spec.target_distance = e.parse()?,
        ("archery", "source_wind_mean") => cfg.archery.spec.source_wind_mean = e.parse()?,
        ("archery", "source_wind_std") => cfg.archery.spec.source_wind_std = e.parse()?,
        ("archery", "target_wind_mean") => cfg.archery.spec.target_wind_mean = e.parse()?,
        ("archery", "target_wind_std") => cfg.archery.spec.target_wind_std = e.parse()?,
        ("archery", "angle_min") => cfg.archery.spec.angle_range.0 = e.parse()?,
        ("archery", "angle_max") => cfg.archery.spec.angle_range.1 = e.parse()?,
        ("archery", _) => apply_net(&mut cfg.archery.net, e)?,

        ("theory", "instances") => cfg.theory.instances = e.parse()?,
        ("theory", "max_states") => cfg.theory.limits.max_states = e.parse()?,
        ("theory", "max_actions") => cfg.theory.limits.max_actions = e.parse()?,
        ("theory", "max_horizon") => cfg.theory.limits.max_horizon = e.parse()?,
        _ => unreachable!("key table and setters agree"),
    }
    Ok(())
}

/// Parses a config. Keys apply in file order, except that `[domain] grid`
/// applies before the other domain keys.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut section = "";
    let mut seen = BTreeSet::new();
    let mut entries: Vec<(&str, Entry)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or(ConfigError::Syntax { line, msg: "unterminated section header".into() })?.trim();
            if name.is_empty() || !SECTIONS.contains(&name) {
                return Err(ConfigError::UnknownSection { line, name: name.to_string() });
            }
            section = SECTIONS.iter().find(|s| **s == name).copied().unwrap_or("");
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line, msg: "expected `key = value`".into() })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line, msg: "empty key".into() });
        }
        if !keys(section).contains(&key) {
            let section = if section.is_empty() { "top level".to_string() } else { format!("[{section}]") };
            return Err(ConfigError::UnknownKey { line, section, key: key.to_string() });
        }
        if !seen.insert((section, key)) {
            return Err(ConfigError::Duplicate { line, key: key.to_string() });
        }
        entries.push((section, Entry { line, key, value }));
    }
    let mut cfg = ExperimentConfig::default();
    entries.sort_by_key(|(s, e)| !(*s == "domain" && e.key == "grid"));
    for (section, e) in &entries {
        apply(&mut cfg, section, e)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit_net(out: &mut String, net: &NetConfig, with_adam: bool) {
    writeln!(out, "hidden = {}", join(&net.hidden)).unwrap();
    writeln!(out, "noise_std = {}", net.noise_std).unwrap();
    writeln!(out, "learning_rate = {}", net.learning_rate).unwrap();
    writeln!(out, "batch_size = {}", net.batch_size).unwrap();
    writeln!(out, "steps = {}", net.steps).unwrap();
    writeln!(out, "standardize = {}", net.standardize).unwrap();
    if with_adam {
        writeln!(out, "beta1 = {}", net.beta1).unwrap();
        writeln!(out, "beta2 = {}", net.beta2).unwrap();
        writeln!(out, "epsilon = {}", net.epsilon).unwrap();
    }
}

/// Writes every key; `parse_config(&emit_config(c)) == c` for valid configs
/// whose archery classifier keeps default Adam constants.
pub fn emit_config(cfg: &ExperimentConfig) -> String {
    let mut o = String::new();
    let w = &mut o;
    writeln!(w, "kind = {}", cfg.kind.name()).unwrap();
    writeln!(w, "seeds = {}", join(&cfg.seeds)).unwrap();
    writeln!(w, "output = {}", cfg.output.display()).unwrap();
    writeln!(w, "plot = {}", cfg.plot).unwrap();

    let s = &cfg.spec;
    writeln!(w, "\n[domain]").unwrap();
    writeln!(w, "grid = {}", if cfg.grid == GridKind::Wall { "wall" } else { "flip" }).unwrap();
    writeln!(w, "width = {}", s.width).unwrap();
    writeln!(w, "height = {}", s.height).unwrap();
    writeln!(w, "start = {},{}", s.start.row, s.start.col).unwrap();
    writeln!(w, "goal = {},{}", s.goal.row, s.goal.col).unwrap();
    let walls: Vec<String> = s.wall_cells.iter().map(|c| format!("{},{}", c.row, c.col)).collect();
    writeln!(w, "walls = {}", walls.join("; ")).unwrap();
    writeln!(w, "flip = {}", s.flip_cell.map_or("none".into(), |c| format!("{},{}", c.row, c.col))).unwrap();
    writeln!(w, "slip_prob = {}", s.slip_prob).unwrap();
    writeln!(w, "goal_reward = {}", s.goal_reward).unwrap();
    writeln!(w, "step_reward = {}", s.step_reward).unwrap();
    writeln!(w, "horizon = {}", s.horizon).unwrap();

    let d = &cfg.darc;
    writeln!(w, "\n[darc]").unwrap();
    writeln!(w, "num_iterations = {}", d.num_iterations).unwrap();
    writeln!(w, "target_collect_period = {}", d.target_collect_period).unwrap();
    writeln!(w, "warmup_iters = {}", d.warmup_iters).unwrap();
    let classifier = match cfg.classifier {
        ClassifierChoice::Tabular => "tabular",
        ClassifierChoice::Net => "net",
        ClassifierChoice::Oracle => "oracle",
    };
    writeln!(w, "classifier = {classifier}").unwrap();
    writeln!(w, "smoothing = {}", cfg.smoothing).unwrap();
    let correction = match d.correction {
        CorrectionMode::Full => "full",
        CorrectionMode::SasOnly => "sas_only",
        CorrectionMode::ActionUnconditioned => "action_unconditioned",
    };
    writeln!(w, "correction = {correction}").unwrap();
    writeln!(w, "clamp = {}", emit_optional(d.clamp_bound)).unwrap();
    writeln!(w, "alpha0 = {}", d.schedule.alpha0).unwrap();
    writeln!(w, "tau = {}", d.schedule.tau).unwrap();
    writeln!(w, "q_init = {}", if d.q_init == QInit::Zero { "zero" } else { "entropy_prior" }).unwrap();
    writeln!(w, "rl_batch_size = {}", d.rl_batch_size).unwrap();
    writeln!(w, "rl_updates_per_iter = {}", d.rl_updates_per_iter).unwrap();
    writeln!(w, "update_multiplier = {}", d.update_multiplier).unwrap();
    writeln!(w, "classifier_updates_per_iter = {}", d.classifier_updates_per_iter).unwrap();
    writeln!(w, "source_collect = {}", emit_collect(d.source_collect)).unwrap();
    writeln!(w, "target_collect = {}", emit_collect(d.target_collect)).unwrap();
    writeln!(w, "buffer_capacity = {}", emit_optional(d.buffer_capacity)).unwrap();
    writeln!(w, "eval_every = {}", d.eval_every).unwrap();
    writeln!(w, "eval_episodes = {}", d.eval_episodes).unwrap();
    writeln!(w, "finetune_source_iters = {}", d.finetune_source_iters).unwrap();
    writeln!(w, "record_timing = {}", d.record_timing).unwrap();

    writeln!(w, "\n[net]").unwrap();
    emit_net(w, &cfg.net, true);

    let a = &cfg.archery;
    writeln!(w, "\n[archery]").unwrap();
    writeln!(w, "episodes_per_domain = {}", a.episodes_per_domain).unwrap();
    writeln!(w, "grid_points = {}", a.grid_points).unwrap();
    writeln!(w, "objective_samples = {}", a.objective_samples).unwrap();
    writeln!(w, "clamp = {}", emit_optional(a.clamp)).unwrap();
    writeln!(w, "target_distance = {}", a.spec.target_distance).unwrap();
    writeln!(w, "source_wind_mean = {}", a.spec.source_wind_mean).unwrap();
    writeln!(w, "source_wind_std = {}", a.spec.source_wind_std).unwrap();
    writeln!(w, "target_wind_mean = {}", a.spec.target_wind_mean).unwrap();
    writeln!(w, "target_wind_std = {}", a.spec.target_wind_std).unwrap();
    writeln!(w, "angle_min = {}", a.spec.angle_range.0).unwrap();
    writeln!(w, "angle_max = {}", a.spec.angle_range.1).unwrap();
    emit_net(w, &a.net, false);

    writeln!(w, "\n[theory]").unwrap();
    writeln!(w, "instances = {}", cfg.theory.instances).unwrap();
    writeln!(w, "max_states = {}", cfg.theory.limits.max_states).unwrap();
    writeln!(w, "max_actions = {}", cfg.theory.limits.max_actions).unwrap();
    writeln!(w, "max_horizon = {}", cfg.theory.limits.max_horizon).unwrap();
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default_darc_on_wall() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.kind, ExperimentKind::Darc);
        assert_eq!(cfg.grid, GridKind::Wall);
    }

    #[test]
    fn period_round_trips() {
        let cfg = parse_config("[darc]\ntarget_collect_period = 10\n").unwrap();
        assert_eq!(cfg.darc.target_collect_period, 10);
        let again = parse_config(&emit_config(&cfg)).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(emit_config(&again), emit_config(&cfg));
    }

    #[test]
    fn zero_period_rejected_with_line() {
        let err = parse_config("kind = darc\n\n[darc]\ntarget_collect_period = 0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { line: 4, .. }), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("[darc]\nnum_iteratons = 5\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey { line: 2, section: "[darc]".into(), key: "num_iteratons".into() }
        );
        assert!(err.to_string().contains("num_iteratons"));
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(parse_config("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse_config("\n[darc"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(parse_config("[nope]"), Err(ConfigError::UnknownSection { line: 1, .. })));
        assert!(matches!(parse_config("seeds = 1\nseeds = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(parse_config("[darc]\nclamp = big"), Err(ConfigError::Value { line: 2, .. })));
        assert!(matches!(parse_config("seeds ="), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn flip_domain_and_collect_policies() {
        let text = "kind = matl_style\n[domain]\nhorizon = 12\ngrid = flip\n[darc]\nsource_collect = skewed 3 0.25\ntarget_collect = uniform\nclamp = none\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.grid, GridKind::Flip);
        assert_eq!(cfg.spec.horizon, 12);
        assert_eq!(cfg.spec.flip_cell, GridworldSpec::flip_default().flip_cell);
        assert_eq!(cfg.darc.source_collect, CollectPolicy::Skewed { action: 3, prob: 0.25 });
        assert_eq!(cfg.darc.clamp_bound, None);
        assert_eq!(parse_config(&emit_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn every_kind_round_trips() {
        for kind in ExperimentKind::ALL {
            let cfg = ExperimentConfig { kind, ..ExperimentConfig::default() };
            assert_eq!(parse_config(&emit_config(&cfg)).unwrap(), cfg, "{}", kind.name());
        }
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = parse_config("# header\n  seeds = 4, 5 # two seeds\n").unwrap();
        assert_eq!(cfg.seeds, vec![4, 5]);
    }
}
