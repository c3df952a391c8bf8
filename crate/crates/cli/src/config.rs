//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then a config file, then `--key value`
//! flags. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use cotrain_seg::phantom::PhantomConfig;
use cotrain_seg::trainer::TrainConfig;
use cotrain_seg::{Error, Result};

/// Every accepted key with a one-line description, in emission order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master random seed"),
    ("organs", "number of organs K"),
    (
        "image_size",
        "side length of the square images after cropping",
    ),
    (
        "train_per_organ",
        "training images per single-organ dataset",
    ),
    ("validation", "fully annotated validation images"),
    ("test", "fully annotated test images"),
    (
        "noise_sigma",
        "image noise standard deviation in windowed units",
    ),
    (
        "site_offset_hu",
        "largest per-site intensity offset in pseudo-HU",
    ),
    (
        "mode",
        "individual, self_training, ct, wa, ct_wa or ct_wa_rm",
    ),
    ("epochs", "training epochs"),
    ("batch_size", "images per iteration"),
    ("lr0", "initial learning rate of the cosine schedule"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay"),
    (
        "grad_clip",
        "largest global gradient norm per step (0 disables)",
    ),
    ("gamma", "focal loss exponent"),
    ("epsilon", "dice loss smoothing term"),
    ("lambda_focal", "weight of the focal loss"),
    ("lambda_dice", "weight of the dice loss"),
    ("lambda_soft", "weight of the soft consistency loss"),
    (
        "rampup_fraction",
        "soft-loss ramp-up length as a fraction of all iterations",
    ),
    (
        "ema_alpha",
        "smoothing coefficient of the averaged parameters",
    ),
    ("mask_reading", "region mask reading: selective or literal"),
    ("dilation_radius", "region mask dilation radius in pixels"),
    ("base_channels", "channels of the first network stage"),
    ("data", "dataset file (PHV1)"),
    ("pseudo", "directory written by pseudo-label"),
    ("models", "directory holding individual checkpoints"),
    ("checkpoint", "checkpoint file to evaluate"),
    ("split", "evaluation split: train, validation or test"),
    (
        "out",
        "output file (gen-data) or directory (other commands)",
    ),
    ("runs", "comma-separated run directories for report"),
    ("seeds", "comma-separated seeds for ablation"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Validation,
    Test,
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Validation => "validation",
            EvalSplit::Test => "test",
        }
    }
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "validation" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!(
                "split must be train, validation or test, got {other:?}"
            ))),
        }
    }
}

/// Effective configuration of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    pub data: Option<PathBuf>,
    pub pseudo: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: EvalSplit,
    pub out: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            phantom: PhantomConfig::default(),
            data: None,
            pseudo: None,
            models: None,
            checkpoint: None,
            split: EvalSplit::Test,
            out: None,
            runs: Vec::new(),
            seeds: vec![0, 1, 2],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or(String::new(), |p| p.display().to_string())
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let p = &mut self.phantom;
        match key {
            "seed" => t.seed = parse(key, v)?,
            "organs" => p.organs = parse(key, v)?,
            "image_size" => {
                let s: usize = parse(key, v)?;
                p.height = s;
                p.width = s;
            }
            "train_per_organ" => p.train_per_organ = parse(key, v)?,
            "validation" => p.validation = parse(key, v)?,
            "test" => p.test = parse(key, v)?,
            "noise_sigma" => p.noise_sigma = parse(key, v)?,
            "site_offset_hu" => p.site_offset_hu = parse(key, v)?,
            "mode" => t.mode = v.parse()?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr0" => t.lr0 = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "gamma" => t.gamma = parse(key, v)?,
            "epsilon" => t.epsilon = parse(key, v)?,
            "lambda_focal" => t.lambda_focal = parse(key, v)?,
            "lambda_dice" => t.lambda_dice = parse(key, v)?,
            "lambda_soft" => t.lambda_soft = parse(key, v)?,
            "rampup_fraction" => t.rampup_fraction = parse(key, v)?,
            "ema_alpha" => t.ema_alpha = parse(key, v)?,
            "mask_reading" => t.mask_reading = v.parse()?,
            "dilation_radius" => t.dilation_radius = parse(key, v)?,
            "base_channels" => t.base_channels = parse(key, v)?,
            "data" => self.data = path(v),
            "pseudo" => self.pseudo = path(v),
            "models" => self.models = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "split" => self.split = v.parse()?,
            "out" => self.out = path(v),
            "runs" => self.runs = v.split(',').filter_map(|s| path(s.trim())).collect(),
            "seeds" => self.seeds = list(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Textual value of one key, in a form [`RunConfig::set`] reads back exactly.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let p = &self.phantom;
        Some(match key {
            "seed" => t.seed.to_string(),
            "organs" => p.organs.to_string(),
            "image_size" => p.height.to_string(),
            "train_per_organ" => p.train_per_organ.to_string(),
            "validation" => p.validation.to_string(),
            "test" => p.test.to_string(),
            "noise_sigma" => p.noise_sigma.to_string(),
            "site_offset_hu" => p.site_offset_hu.to_string(),
            "mode" => t.mode.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr0" => t.lr0.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "gamma" => t.gamma.to_string(),
            "epsilon" => t.epsilon.to_string(),
            "lambda_focal" => t.lambda_focal.to_string(),
            "lambda_dice" => t.lambda_dice.to_string(),
            "lambda_soft" => t.lambda_soft.to_string(),
            "rampup_fraction" => t.rampup_fraction.to_string(),
            "ema_alpha" => t.ema_alpha.to_string(),
            "mask_reading" => t.mask_reading.to_string(),
            "dilation_radius" => t.dilation_radius.to_string(),
            "base_channels" => t.base_channels.to_string(),
            "data" => show_path(&self.data),
            "pseudo" => show_path(&self.pseudo),
            "models" => show_path(&self.models),
            "checkpoint" => show_path(&self.checkpoint),
            "split" => self.split.as_str().to_string(),
            "out" => show_path(&self.out),
            "runs" => self
                .runs
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
            "seeds" => join(&self.seeds),
            _ => return None,
        })
    }

    pub fn apply(&mut self, file: &ConfigFile) -> Result<()> {
        for (key, value) in file.entries() {
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Checks the training and phantom settings.
    pub fn check(&self) -> Result<()> {
        self.phantom.check()?;
        self.train.check()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Line {
    Blank,
    Comment(String),
    Entry(String, String),
}

/// A parsed config file that remembers comments and blank lines, so emitting
/// it changes whitespace only.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigFile {
    lines: Vec<Line>,
}

impl ConfigFile {
    /// Parses `key = value` lines; `#` starts a comment line. Keys are checked
    /// against [`KEYS`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                lines.push(Line::Blank);
            } else if let Some(c) = line.strip_prefix('#') {
                lines.push(Line::Comment(c.trim().to_string()));
            } else {
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "line {}: expected `key = value`, got {line:?}",
                        n + 1
                    ))
                })?;
                let key = k.trim();
                if !KEYS.iter().any(|(name, _)| *name == key) {
                    return Err(Error::Config(format!(
                        "line {}: unknown config key {key:?}",
                        n + 1
                    )));
                }
                lines.push(Line::Entry(key.to_string(), v.trim().to_string()));
            }
        }
        Ok(Self { lines })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.lines.iter().filter_map(|l| match l {
            Line::Entry(k, v) => Some((k.as_str(), v.as_str())),
            _ => None,
        })
    }

    /// Canonical text: `key = value`, `# comment`, blank lines kept.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            match l {
                Line::Blank => out.push('\n'),
                Line::Comment(c) if c.is_empty() => out.push_str("#\n"),
                Line::Comment(c) => {
                    let _ = writeln!(out, "# {c}");
                }
                Line::Entry(k, v) => {
                    let _ = writeln!(out, "{k} = {v}");
                }
            }
        }
        out
    }
}

/// Parsed command line: command name, optional config file and overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandLine {
    pub command: String,
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

impl CommandLine {
    pub fn parse<I, S>(argv: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut args = argv.into_iter().map(Into::into);
        let command = args
            .next()
            .ok_or_else(|| Error::Config("missing command".into()))?;
        let mut config = None;
        let mut overrides = Vec::new();
        while let Some(flag) = args.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected a --flag, got {flag:?}")))?
                .replace('-', "_");
            let value = args
                .next()
                .ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?;
            if key == "config" {
                config = Some(PathBuf::from(value));
            } else if KEYS.iter().any(|(name, _)| *name == key) {
                overrides.push((key, value));
            } else {
                return Err(Error::Config(format!("unknown flag --{key}")));
            }
        }
        Ok(Self {
            command,
            config,
            overrides,
        })
    }

    /// Defaults, then the config file, then the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            cfg.apply(&ConfigFile::parse(&text)?)?;
        }
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}
