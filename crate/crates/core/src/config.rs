//! Run configuration: every hyper-parameter, with a flat sectioned
//! `key = value` text format.
//!
//! ```text
//! [model]
//! d = 768
//! heads = 12
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Unknown sections or
//! keys are errors.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Layer stack transplanted and kept fixed.
    Frozen,
    /// Layer stack transplanted and trained.
    Finetune,
    /// Layer stack re-initialised and trained.
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Pretrain,
    Tc,
    Zsl,
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

macro_rules! keyword_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($ty::$var),)+
                    _ => Err(format!("expected one of {}", [$($s),+].join("|"))),
                }
            }
        }
    };
}

keyword_enum!(Mode { Frozen => "frozen", Finetune => "finetune", Scratch => "scratch" });
keyword_enum!(Task { Pretrain => "pretrain", Tc => "tc", Zsl => "zsl", Qa => "qa" });
keyword_enum!(Precision { F64 => "f64", F32 => "f32" });

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    /// Triples per sampled sub-graph.
    pub k: usize,
    pub mask_rate: f64,
    pub mem_negatives: usize,
    pub epm_positive_prob: f64,
    /// Reuse the first epoch's samples in every epoch.
    pub fixed_samples: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the total steps spent in linear warm-up.
    pub warmup_ratio: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub use_mem: bool,
    pub use_mrm: bool,
    pub use_epm: bool,
    pub epochs: usize,
    /// Overrides `epochs` when positive.
    pub steps: usize,
    pub optim: OptimConfig,
    pub log_every: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub mode: Mode,
    pub task: Task,
    /// Steps of pretraining objectives on the task graph before tuning.
    pub continual_steps: usize,
    pub steps: usize,
    pub optim: OptimConfig,
    /// Micro-batches accumulated per optimizer step.
    pub accumulation: usize,
    pub tc_negatives: usize,
    pub zsl_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathsConfig {
    /// Pretraining triple files.
    pub graph: Vec<PathBuf>,
    /// Task-graph triple files.
    pub task_graph: Vec<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub classes: Option<PathBuf>,
    /// Checkpoint to start from.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub pretrain: PretrainConfig,
    pub tune: TuneConfig,
    pub seed: u64,
    pub precision: Precision,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    /// Published pretraining settings.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::default(),
            sampling: SamplingConfig {
                k: 126,
                mask_rate: 0.15,
                mem_negatives: 2,
                epm_positive_prob: 0.5,
                fixed_samples: false,
            },
            pretrain: PretrainConfig {
                use_mem: true,
                use_mrm: true,
                use_epm: true,
                epochs: 10,
                steps: 0,
                optim: OptimConfig {
                    lr: 1e-4,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    warmup_ratio: 0.1,
                    batch: 4,
                },
                log_every: 1,
                checkpoint_every: 0,
            },
            tune: TuneConfig {
                mode: Mode::Frozen,
                task: Task::Tc,
                continual_steps: 1000,
                steps: 1000,
                optim: OptimConfig {
                    lr: 1e-4,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    warmup_ratio: 0.1,
                    batch: 4,
                },
                accumulation: 1,
                tc_negatives: 10,
                zsl_negatives: 4,
            },
            seed: 0,
            precision: Precision::F64,
            paths: PathsConfig {
                out_dir: PathBuf::from("runs"),
                ..PathsConfig::default()
            },
        }
    }

    /// Small dimensions for quick runs on one core.
    pub fn smoke() -> Self {
        let mut c = Self::paper();
        c.model = ModelConfig::toy(32, 4, 2);
        c.sampling.k = 8;
        c.pretrain.steps = 200;
        c.pretrain.optim.lr = 1e-3;
        c.tune.continual_steps = 100;
        c.tune.steps = 200;
        c.tune.optim.lr = 1e-3;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(vec![format!(
                "unknown preset `{other}` (expected paper|smoke)"
            )])),
        }
    }

    /// Field problems independent of the command being run.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems();
        let s = &self.sampling;
        if s.k == 0 {
            out.push("sampling.k must be at least 1".into());
        }
        if !(s.mask_rate > 0.0 && s.mask_rate < 1.0) {
            out.push(format!("sampling.mask_rate ({}) must lie in (0, 1)", s.mask_rate));
        }
        if !(0.0..=1.0).contains(&s.epm_positive_prob) {
            out.push("sampling.epm_positive_prob must lie in [0, 1]".into());
        }
        optim_problems("pretrain", &self.pretrain.optim, &mut out);
        optim_problems("tune", &self.tune.optim, &mut out);
        let p = &self.pretrain;
        if !(p.use_mem || p.use_mrm || p.use_epm) {
            out.push("pretrain: at least one of use_mem, use_mrm, use_epm must be true".into());
        }
        if p.epochs == 0 && p.steps == 0 {
            out.push("pretrain: one of epochs or steps must be positive".into());
        }
        if self.tune.accumulation == 0 {
            out.push("tune.accumulation must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Checks for the `pretrain` command.
    pub fn validate_pretrain(&self) -> Result<()> {
        let mut p = self.problems();
        if self.paths.graph.is_empty() {
            p.push("paths.graph must name at least one triple file".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Checks for the `tune` and `eval` commands.
    pub fn validate_task(&self, needs_checkpoint: bool) -> Result<()> {
        let mut p = self.problems();
        let t = &self.tune;
        if t.task == Task::Pretrain {
            p.push("tune.task must be tc, zsl or qa".into());
        }
        if self.paths.task_graph.is_empty() {
            p.push("paths.task_graph must name at least one triple file".into());
        }
        if self.paths.test.is_none() {
            p.push("paths.test is required".into());
        }
        if matches!(t.task, Task::Zsl | Task::Qa) && self.paths.features.is_none() {
            p.push(format!("paths.features is required for task {}", t.task));
        }
        if t.task == Task::Zsl && self.paths.classes.is_none() {
            p.push("paths.classes is required for task zsl".into());
        }
        if needs_checkpoint && self.paths.checkpoint.is_none() {
            p.push(format!("paths.checkpoint is required for mode {}", t.mode));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// `(section, key, value)` for every field, in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let m = &self.model;
        let s = &self.sampling;
        let p = &self.pretrain;
        let t = &self.tune;
        let paths = &self.paths;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|x| x.display().to_string()).unwrap_or_default();
        let list = |v: &[PathBuf]| {
            v.iter()
                .map(|x| x.display().to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = vec![
            ("run", "seed", self.seed.to_string()),
            ("run", "precision", self.precision.to_string()),
            ("model", "d", m.d.to_string()),
            ("model", "heads", m.heads.to_string()),
            ("model", "layers", m.layers.to_string()),
            ("model", "ffn_mult", m.ffn_mult.to_string()),
            ("model", "init_std", m.init_std.to_string()),
            ("model", "ln_eps", m.ln_eps.to_string()),
            ("model", "delta", m.delta.to_string()),
            ("model", "dropout", m.dropout.to_string()),
            ("model", "use_matrix", m.use_matrix.to_string()),
            ("sampling", "k", s.k.to_string()),
            ("sampling", "mask_rate", s.mask_rate.to_string()),
            ("sampling", "mem_negatives", s.mem_negatives.to_string()),
            ("sampling", "epm_positive_prob", s.epm_positive_prob.to_string()),
            ("sampling", "fixed_samples", s.fixed_samples.to_string()),
            ("pretrain", "use_mem", p.use_mem.to_string()),
            ("pretrain", "use_mrm", p.use_mrm.to_string()),
            ("pretrain", "use_epm", p.use_epm.to_string()),
            ("pretrain", "epochs", p.epochs.to_string()),
            ("pretrain", "steps", p.steps.to_string()),
        ];
        optim_entries("pretrain", &p.optim, &mut out);
        out.extend([
            ("pretrain", "log_every", p.log_every.to_string()),
            ("pretrain", "checkpoint_every", p.checkpoint_every.to_string()),
            ("tune", "mode", t.mode.to_string()),
            ("tune", "task", t.task.to_string()),
            ("tune", "continual_steps", t.continual_steps.to_string()),
            ("tune", "steps", t.steps.to_string()),
        ]);
        optim_entries("tune", &t.optim, &mut out);
        out.extend([
            ("tune", "accumulation", t.accumulation.to_string()),
            ("tune", "tc_negatives", t.tc_negatives.to_string()),
            ("tune", "zsl_negatives", t.zsl_negatives.to_string()),
            ("paths", "graph", list(&paths.graph)),
            ("paths", "task_graph", list(&paths.task_graph)),
            ("paths", "train", opt(&paths.train)),
            ("paths", "test", opt(&paths.test)),
            ("paths", "features", opt(&paths.features)),
            ("paths", "classes", opt(&paths.classes)),
            ("paths", "checkpoint", opt(&paths.checkpoint)),
            ("paths", "out_dir", paths.out_dir.display().to_string()),
        ]);
        out
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<V: FromStr>(v: &str) -> std::result::Result<V, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("expected a boolean, got `{v}`")),
            }
        }
        let opt = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        let list = |v: &str| -> Vec<PathBuf> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(PathBuf::from)
                .collect()
        };
        let m = &mut self.model;
        let s = &mut self.sampling;
        let p = &mut self.pretrain;
        let t = &mut self.tune;
        match (section, key) {
            ("run", "seed") => self.seed = num(value)?,
            ("run", "precision") => self.precision = value.parse()?,
            ("model", "d") => m.d = num(value)?,
            ("model", "heads") => m.heads = num(value)?,
            ("model", "layers") => m.layers = num(value)?,
            ("model", "ffn_mult") => m.ffn_mult = num(value)?,
            ("model", "init_std") => m.init_std = num(value)?,
            ("model", "ln_eps") => m.ln_eps = num(value)?,
            ("model", "delta") => m.delta = num(value)?,
            ("model", "dropout") => m.dropout = num(value)?,
            ("model", "use_matrix") => m.use_matrix = flag(value)?,
            ("sampling", "k") => s.k = num(value)?,
            ("sampling", "mask_rate") => s.mask_rate = num(value)?,
            ("sampling", "mem_negatives") => s.mem_negatives = num(value)?,
            ("sampling", "epm_positive_prob") => s.epm_positive_prob = num(value)?,
            ("sampling", "fixed_samples") => s.fixed_samples = flag(value)?,
            ("pretrain", "use_mem") => p.use_mem = flag(value)?,
            ("pretrain", "use_mrm") => p.use_mrm = flag(value)?,
            ("pretrain", "use_epm") => p.use_epm = flag(value)?,
            ("pretrain", "epochs") => p.epochs = num(value)?,
            ("pretrain", "steps") => p.steps = num(value)?,
            ("pretrain", "log_every") => p.log_every = num(value)?,
            ("pretrain", "checkpoint_every") => p.checkpoint_every = num(value)?,
            ("pretrain", k) if set_optim(&mut p.optim, k, value)? => {}
            ("tune", "mode") => t.mode = value.parse()?,
            ("tune", "task") => t.task = value.parse()?,
            ("tune", "continual_steps") => t.continual_steps = num(value)?,
            ("tune", "steps") => t.steps = num(value)?,
            ("tune", "accumulation") => t.accumulation = num(value)?,
            ("tune", "tc_negatives") => t.tc_negatives = num(value)?,
            ("tune", "zsl_negatives") => t.zsl_negatives = num(value)?,
            ("tune", k) if set_optim(&mut t.optim, k, value)? => {}
            ("paths", "graph") => self.paths.graph = list(value),
            ("paths", "task_graph") => self.paths.task_graph = list(value),
            ("paths", "train") => self.paths.train = opt(value),
            ("paths", "test") => self.paths.test = opt(value),
            ("paths", "features") => self.paths.features = opt(value),
            ("paths", "classes") => self.paths.classes = opt(value),
            ("paths", "checkpoint") => self.paths.checkpoint = opt(value),
            ("paths", "out_dir") => self.paths.out_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key `{section}.{key}`")),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let fail = |m: String| Error::Config(vec![m]);
        let (lhs, value) = assignment
            .split_once('=')
            .ok_or_else(|| fail(format!("override `{assignment}` is not section.key=value")))?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| fail(format!("override key `{lhs}` is not section.key")))?;
        self.set(section.trim(), key.trim(), value.trim())
            .map_err(|m| fail(format!("{}.{}: {m}", section.trim(), key.trim())))
    }

    /// Parses a config file on top of `base`.
    pub fn parse_onto(mut base: Self, text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut errors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_owned();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected key = value", i + 1));
                continue;
            };
            if let Err(m) = base.set(&section, k.trim(), v.trim()) {
                errors.push(format!("line {}: {m}", i + 1));
            }
        }
        if errors.is_empty() {
            Ok(base)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_onto(Self::paper(), text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

fn optim_entries(section: &'static str, o: &OptimConfig, out: &mut Vec<(&'static str, &'static str, String)>) {
    out.extend([
        (section, "lr", o.lr.to_string()),
        (section, "beta1", o.beta1.to_string()),
        (section, "beta2", o.beta2.to_string()),
        (section, "eps", o.eps.to_string()),
        (section, "warmup_ratio", o.warmup_ratio.to_string()),
        (section, "batch", o.batch.to_string()),
    ]);
}

fn set_optim(o: &mut OptimConfig, key: &str, value: &str) -> std::result::Result<bool, String> {
    let f = |v: &str| v.parse::<f64>().map_err(|_| format!("cannot parse `{v}`"));
    match key {
        "lr" => o.lr = f(value)?,
        "beta1" => o.beta1 = f(value)?,
        "beta2" => o.beta2 = f(value)?,
        "eps" => o.eps = f(value)?,
        "warmup_ratio" => o.warmup_ratio = f(value)?,
        "batch" => o.batch = value.parse().map_err(|_| format!("cannot parse `{value}`"))?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn optim_problems(section: &str, o: &OptimConfig, out: &mut Vec<String>) {
    if !(o.lr > 0.0) {
        out.push(format!("{section}.lr must be positive"));
    }
    if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
        out.push(format!("{section}.beta1 and {section}.beta2 must lie in [0, 1)"));
    }
    if !(o.eps > 0.0) {
        out.push(format!("{section}.eps must be positive"));
    }
    if !(0.0..1.0).contains(&o.warmup_ratio) {
        out.push(format!("{section}.warmup_ratio must lie in [0, 1)"));
    }
    if o.batch == 0 {
        out.push(format!("{section}.batch must be at least 1"));
    }
}
