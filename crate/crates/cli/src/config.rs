//! Flat `key=value` configuration with precedence defaults < file < flags.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Every key a config file may set. Keys match the long flag names with
/// `-` replaced by `_`.
pub const KNOWN_KEYS: &[&str] = &[
    "b",
    "batch_size",
    "candidates",
    "corpus",
    "delta",
    "dim",
    "distance",
    "epochs",
    "eval_depth",
    "eval_queries",
    "format",
    "hit_rate",
    "index",
    "init",
    "jobs",
    "k",
    "k1",
    "ks",
    "learning_rate",
    "margin",
    "mask_rate",
    "method",
    "min_count",
    "mix_stage1_pairs",
    "model",
    "neg_per_query",
    "objective",
    "out",
    "pairs",
    "pretrain_epochs",
    "pretrain_learning_rate",
    "qrels",
    "queries",
    "rounds",
    "run",
    "runs",
    "scheme",
    "seed",
    "step",
    "tag",
    "top_n",
    "variant",
    "vocab",
    "weights",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// Parses config text. Blank lines and `#` comments are ignored; a later
/// line for the same key replaces an earlier one.
pub fn parse_config(text: &str, source: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("{source}:{}: expected key=value", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KNOWN_KEYS.contains(&k) {
            return Err(CliError::Usage(format!("{source}:{}: unknown config key `{k}`", i + 1)));
        }
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

pub struct Resolver {
    file: BTreeMap<String, String>,
    file_name: String,
    resolved: Vec<(String, String, Source)>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self, CliError> {
        let (file, file_name) = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                let name = path.display().to_string();
                (parse_config(&text, &name)?, name)
            }
            None => (BTreeMap::new(), String::new()),
        };
        Ok(Resolver {
            file,
            file_name,
            resolved: Vec::new(),
        })
    }

    fn lookup<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<(T, Source)>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        if let Some(v) = flag {
            return Ok(Some((v, Source::Flag)));
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(|v| Some((v, Source::File)))
                .map_err(|e| CliError::Usage(format!("{}: invalid value for `{key}`: {e}", self.file_name))),
            None => Ok(None),
        }
    }

    fn record(&mut self, key: &str, value: impl Display, source: Source) {
        self.resolved.push((key.to_string(), value.to_string(), source));
    }

    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let (v, src) = self.lookup(key, flag)?.unwrap_or((default, Source::Default));
        self.record(key, &v, src);
        Ok(v)
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.lookup(key, flag)? {
            Some((v, src)) => {
                self.record(key, &v, src);
                Ok(Some(v))
            }
            None => {
                self.record(key, "-", Source::Default);
                Ok(None)
            }
        }
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.lookup(key, flag)? {
            Some((v, src)) => {
                self.record(key, &v, src);
                Ok(v)
            }
            None => Err(CliError::Usage(format!(
                "missing required setting `{key}` (flag --{} or config key)",
                key.replace('_', "-")
            ))),
        }
    }

    /// A required path that must already exist.
    pub fn input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p: PathArg = self.required(key, flag.map(PathArg))?;
        check_exists(key, &p.0)?;
        Ok(p.0)
    }

    pub fn optional_input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        let p: Option<PathArg> = self.optional(key, flag.map(PathArg))?;
        match p {
            Some(p) => {
                check_exists(key, &p.0)?;
                Ok(Some(p.0))
            }
            None => Ok(None),
        }
    }

    pub fn output_dir(&mut self, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        Ok(self.required("out", flag.map(PathArg))?.0)
    }

    /// `key=value  (source)` lines for every resolved setting.
    pub fn echo(&self) -> String {
        let width = self.resolved.iter().map(|(k, v, _)| k.len() + v.len() + 1).max().unwrap_or(0);
        self.resolved
            .iter()
            .map(|(k, v, s)| format!("config: {:<width$}  ({s})\n", format!("{k}={v}")))
            .collect()
    }
}

fn check_exists(key: &str, p: &Path) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{key}: file not found: {}", p.display())))
    }
}

/// Path value that prints as a plain path in the config echo.
#[derive(Debug, Clone, PartialEq)]
pub struct PathArg(pub PathBuf);

impl FromStr for PathArg {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(PathArg(PathBuf::from(s)))
    }
}

impl Display for PathArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.display().fmt(f)
    }
}

/// Comma-separated list, e.g. `3,10` or `a.run,b.run,c.run`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|x| x.trim().parse::<T>().map_err(|e| format!("`{x}`: {e}")))
            .collect::<Result<Vec<T>, String>>()
            .map(List)
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            x.fmt(f)?;
        }
        Ok(())
    }
}

pub type Paths = List<PathArg>;
