//! Flat sectioned key-value configuration.
//!
//! ```text
//! [schedule]
//! kind = cosine   # comments run to end of line
//! theta = 1
//! ```
//!
//! Every key a command understands appears in its defaults, so a typo in a
//! file or flag is rejected instead of silently ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mrsde::{DecoupledVolatility, Error, ForwardProcess, ProcessParams, Result, Schedule, ScheduleKind, VolatilityMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Cocycle,
    Tdd,
    TrainRestore,
    Compare,
}

impl Command {
    pub const ALL: [Command; 5] =
        [Command::Simulate, Command::Cocycle, Command::Tdd, Command::TrainRestore, Command::Compare];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Cocycle => "cocycle",
            Command::Tdd => "tdd",
            Command::TrainRestore => "train-restore",
            Command::Compare => "compare",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown command '{s}'")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Invalid(format!("line {}: unterminated section header", no + 1)))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::Invalid(format!("line {}: empty section name", no + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("line {}: expected 'key = value'", no + 1)))?;
            let section = section
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("line {}: key outside of any section", no + 1)))?;
            cfg.insert(section, key.trim(), value.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, section: &str, key: &str, value: &str) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.to_string());
    }

    fn from_pairs(pairs: &[(&str, &str, &str)]) -> Self {
        let mut cfg = Config::default();
        for (s, k, v) in pairs {
            cfg.insert(s, k, v);
        }
        cfg
    }

    /// Overlay `other` onto `self`; every key of `other` must already exist.
    pub fn merge(&mut self, other: &Config) -> Result<()> {
        for (section, keys) in &other.sections {
            for (key, value) in keys {
                self.set(&format!("{section}.{key}"), value)?;
            }
        }
        Ok(())
    }

    /// Set a known `section.key`.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| Error::Invalid(format!("option '{dotted}' must have the form section.key")))?;
        match self.sections.get_mut(section).and_then(|s| s.get_mut(key)) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Invalid(format!("unknown option '{dotted}'"))),
        }
    }

    pub fn sections(&self) -> &BTreeMap<String, BTreeMap<String, String>> {
        &self.sections
    }

    pub fn str(&self, dotted: &str) -> Result<&str> {
        let (section, key) = dotted.split_once('.').expect("dotted key");
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(String::as_str)
            .ok_or_else(|| Error::Invalid(format!("missing option '{dotted}'")))
    }

    pub fn get<T: FromStr>(&self, dotted: &str) -> Result<T> {
        let raw = self.str(dotted)?;
        raw.parse()
            .map_err(|_| Error::Invalid(format!("option '{dotted}': cannot parse '{raw}'")))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T: FromStr>(&self, dotted: &str) -> Result<Vec<T>> {
        let raw = self.str(dotted)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Invalid(format!("option '{dotted}': cannot parse '{s}'"))))
            .collect()
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        for (i, (section, keys)) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            for (key, value) in keys {
                let _ = writeln!(out, "{key} = {value}");
            }
        }
        out
    }

    /// Values as JSON, with plain numbers typed and everything else a string.
    pub fn to_json(&self) -> serde_json::Value {
        let mut root = serde_json::Map::new();
        for (section, keys) in &self.sections {
            let mut obj = serde_json::Map::new();
            for (key, value) in keys {
                let v = match value.parse::<f64>() {
                    Ok(x) if x.is_finite() && !value.contains(',') => serde_json::json!(x),
                    _ => serde_json::Value::String(value.clone()),
                };
                obj.insert(key.clone(), v);
            }
            root.insert(section.clone(), serde_json::Value::Object(obj));
        }
        serde_json::Value::Object(root)
    }
}

/// Built-in defaults for a command.
pub fn defaults(command: Command) -> Config {
    let out = format!("out/{}", command.name());
    let mut cfg = match command {
        Command::Simulate => Config::from_pairs(&[
            ("schedule", "kind", "constant"),
            ("schedule", "theta", "1"),
            ("schedule", "k", "1"),
            ("schedule", "t_end", "1"),
            ("process", "d", "1"),
            ("process", "mu", "0"),
            ("process", "lambda", "1"),
            ("process", "tau", "1"),
            ("process", "sigma", ""),
            ("process", "x0", "2"),
            ("mc", "paths", "10000"),
            ("mc", "steps", "1000"),
            ("mc", "stride", "10"),
            ("mc", "seed", "42"),
        ]),
        Command::Cocycle => Config::from_pairs(&[
            ("schedule", "kind", "constant"),
            ("schedule", "theta", "1"),
            ("schedule", "k", "1"),
            ("schedule", "t_end", "1"),
            ("process", "d", "1"),
            ("process", "mu", "0"),
            ("process", "lambda", "1"),
            ("process", "tau", "1"),
            ("process", "sigma", ""),
            ("process", "x0", "2"),
            ("mc", "paths", "100"),
            ("mc", "steps", "1000"),
            ("mc", "seed", "42"),
            ("cocycle", "pairs", "0.1:0.3, 0.2:0.5, 0.25:0.75, 0.4:0.9, 0.5:1"),
            ("cocycle", "tol", "1e-12"),
        ]),
        Command::Tdd => Config::from_pairs(&[
            ("schedule", "kind", "constant"),
            ("schedule", "theta", "1"),
            ("schedule", "k", "1"),
            ("schedule", "t_end", "1"),
            ("process", "d", "1"),
            ("process", "mu", "0"),
            ("process", "lambda", "1"),
            ("process", "tau", "1"),
            ("process", "sigma", ""),
            ("process", "x0", "40"),
            ("mc", "paths", "500"),
            ("mc", "steps", "200"),
            ("mc", "seed", "42"),
            ("tdd", "delta", "0.05"),
            ("tdd", "t_final", "1"),
            ("tdd", "score_bound", ""),
            ("tdd", "t_grid", "0.25, 0.5, 0.75, 1"),
            ("tdd", "tau_grid", "1, 2, 4"),
            ("tdd", "kl_paths", "20000"),
            ("tdd", "kl_steps", "2000"),
        ]),
        Command::TrainRestore => Config::from_pairs(&[
            ("schedule", "kind", "cosine"),
            ("schedule", "theta", "1"),
            ("schedule", "k", "1"),
            ("schedule", "t_end", "1"),
            ("process", "d", "16"),
            ("process", "mu", "measurement"),
            ("process", "lambda", "10"),
            ("process", "tau", "2"),
            ("mc", "seed", "42"),
            ("problem", "operator", "subsample"),
            ("problem", "factor", "2"),
            ("problem", "noise", "0.05"),
            ("problem", "test_signals", "10"),
            ("problem", "train_seed", "1"),
            ("problem", "test_seed", "123"),
            ("train", "steps", "6000"),
            ("train", "batch", "256"),
            ("train", "lr", "1e-3"),
            ("train", "optimizer", "adam"),
            ("train", "weight", "variance"),
            ("train", "milestones", ""),
            ("train", "hidden", "128, 128"),
            ("train", "activation", "tanh"),
            ("train", "data_scale", "1"),
            ("train", "t_min", "1e-3"),
            ("sample", "steps", "1000"),
            ("sample", "t_min", "1e-3"),
            ("sample", "runs", "1"),
        ]),
        Command::Compare => Config::from_pairs(&[
            ("schedule", "kind", "cosine"),
            ("schedule", "theta", "1"),
            ("schedule", "k", "1"),
            ("schedule", "t_end", "1"),
            ("process", "d", "1"),
            ("process", "mu", "3"),
            ("process", "lambda", "1"),
            ("process", "tau", "2"),
            ("mc", "paths", "2000"),
            ("mc", "seed", "0"),
            ("data", "mean", "1"),
            ("data", "std", "1"),
            ("compare", "variants", "d3gm, ou, coef-decoupled"),
            ("compare", "seeds", "10"),
            ("compare", "sigma", "80"),
            ("sample", "steps", "1000"),
            ("sample", "t_min", "1e-3"),
        ]),
    };
    cfg.insert("output", "directory", &out);
    cfg.insert("output", "formats", "csv, json");
    cfg
}

/// Short flags accepted next to the dotted form.
fn alias(flag: &str) -> &str {
    match flag {
        "schedule" => "schedule.kind",
        "seed" => "mc.seed",
        "out" | "output" => "output.directory",
        other => other,
    }
}

/// A command with its fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub config: Config,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        RunConfig { command, config: defaults(command) }
    }

    /// Defaults, then `--config FILE`, then flag overrides, in that order.
    pub fn from_args(command: Command, args: &[String]) -> Result<Self> {
        let mut file = None;
        let mut overrides = Vec::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Invalid(format!("unexpected argument '{arg}'")))?;
            let (name, value) = match flag.split_once('=') {
                Some((n, v)) => (n.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| Error::Invalid(format!("option '--{flag}' needs a value")))?;
                    (flag.to_string(), v.clone())
                }
            };
            if name == "config" {
                file = Some(PathBuf::from(value));
            } else {
                overrides.push((alias(&name).to_string(), value));
            }
        }
        let mut run = Self::defaults(command);
        if let Some(path) = file {
            let loaded = Config::load(&path)?;
            run.config.merge(&loaded)?;
        }
        for (key, value) in overrides {
            run.config.set(&key, &value)?;
        }
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<()> {
        self.formats()?;
        self.schedule()?;
        Ok(())
    }

    pub fn get<T: FromStr>(&self, dotted: &str) -> Result<T> {
        self.config.get(dotted)
    }

    pub fn list<T: FromStr>(&self, dotted: &str) -> Result<Vec<T>> {
        self.config.list(dotted)
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        let dir = self.config.str("output.directory")?;
        if dir.is_empty() {
            return Err(Error::Invalid("output.directory must not be empty".into()));
        }
        Ok(PathBuf::from(dir))
    }

    pub fn formats(&self) -> Result<Formats> {
        let mut f = Formats { csv: false, json: false };
        for name in self.list::<String>("output.formats")? {
            match name.as_str() {
                "csv" => f.csv = true,
                "json" => f.json = true,
                other => return Err(Error::Invalid(format!("unknown output format '{other}'"))),
            }
        }
        Ok(f)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let kind: ScheduleKind = self.config.str("schedule.kind")?.parse()?;
        let s = Schedule::new(kind, self.get("schedule.theta")?)
            .with_k(self.get("schedule.k")?)
            .with_t_end(self.get("schedule.t_end")?);
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> Result<usize> {
        let d: usize = self.get("process.d")?;
        if d == 0 {
            return Err(Error::Invalid("process.d must be at least 1".into()));
        }
        Ok(d)
    }

    /// A scalar is broadcast to all d coordinates.
    pub fn vector(&self, dotted: &str) -> Result<Vec<f64>> {
        let d = self.dim()?;
        let v: Vec<f64> = self.list(dotted)?;
        match v.len() {
            1 => Ok(vec![v[0]; d]),
            n if n == d => Ok(v),
            n => Err(Error::Invalid(format!("option '{dotted}' has {n} entries, expected 1 or {d}"))),
        }
    }

    pub fn params(&self) -> Result<ProcessParams> {
        ProcessParams::new(self.vector("process.mu")?, self.get("process.lambda")?, self.get("process.tau")?)
    }

    /// Coupled unless `process.sigma` is set, which selects a constant
    /// decoupled volatility.
    pub fn process(&self) -> Result<ForwardProcess> {
        let sigma = self.config.str("process.sigma")?;
        let mode = if sigma.is_empty() {
            VolatilityMode::Coupled
        } else {
            let s: f64 = self.get("process.sigma")?;
            VolatilityMode::Decoupled(DecoupledVolatility::Constant(s))
        };
        ForwardProcess::new(self.params()?, self.schedule()?, mode)
    }

    pub fn positive(&self, dotted: &str) -> Result<usize> {
        let n: usize = self.get(dotted)?;
        if n == 0 {
            return Err(Error::Invalid(format!("option '{dotted}' must be at least 1")));
        }
        Ok(n)
    }
}
