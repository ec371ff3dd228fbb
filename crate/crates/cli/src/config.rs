//! Run configuration: every option is a `--key value` flag and, with the same
//! name, a `key = value` line of the config file. Precedence is
//! defaults < config file < command line. Model parameters are set with
//! `--set key=value` or `model.key = value`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use clap::ArgMatches;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    Usage(String),
    /// The run itself failed; exit code 1.
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl CliError {
    pub fn failed(e: impl fmt::Display) -> Self {
        CliError::Failed(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptionSpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn opt(key: &'static str, default: &'static str, help: &'static str) -> OptionSpec {
    OptionSpec { key, default, help }
}

/// `key = value` pairs of a config file with their line numbers. `#` starts
/// a comment; blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected 'key = value', got '{line}'", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
        }
        entries.push((i + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn parse_override(text: &str) -> Result<(String, f64), CliError> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("model parameter '{text}': expected key=value")))?;
    let v = value
        .trim()
        .parse::<f64>()
        .map_err(|_| CliError::Usage(format!("model parameter '{}': '{}' is not a number", key.trim(), value.trim())))?;
    Ok((key.trim().to_string(), v))
}

/// The resolved configuration of one subcommand.
#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
    pub overrides: Vec<(String, f64)>,
}

impl Settings {
    pub fn resolve(specs: &[OptionSpec], accepts_model: bool, matches: &ArgMatches) -> Result<Self, CliError> {
        let mut values: BTreeMap<&'static str, String> =
            specs.iter().map(|s| (s.key, s.default.to_string())).collect();
        let mut overrides = Vec::new();
        if let Some(path) = matches.get_one::<String>("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config file {path}: {e}")))?;
            for (line, key, value) in parse_config_text(&text)? {
                if let Some(param) = key.strip_prefix("model.") {
                    if !accepts_model {
                        return Err(CliError::Usage(format!(
                            "{path}:{line}: this subcommand takes no model parameters ('{key}')"
                        )));
                    }
                    overrides.push(parse_override(&format!("{param}={value}"))?);
                } else if let Some(spec) = specs.iter().find(|s| s.key == key) {
                    values.insert(spec.key, value);
                } else {
                    return Err(CliError::Usage(format!("{path}:{line}: unknown key '{key}'")));
                }
            }
        }
        for spec in specs {
            if let Some(v) = matches.get_one::<String>(spec.key) {
                values.insert(spec.key, v.clone());
            }
        }
        if accepts_model {
            if let Some(items) = matches.get_many::<String>("set") {
                for item in items {
                    overrides.push(parse_override(item)?);
                }
            }
        }
        Ok(Self { values, overrides })
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("option '{key}' is not declared for this subcommand"))
    }

    fn invalid(&self, key: &str, what: &str) -> CliError {
        CliError::Usage(format!("{key} = '{}': {what}", self.get(key)))
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.get(key)
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.invalid(key, "expected a finite number"))
    }

    pub fn positive(&self, key: &str) -> Result<f64, CliError> {
        let v = self.f64(key)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.invalid(key, "must be positive"))
        }
    }

    /// `auto` maps to `None`.
    pub fn auto_positive(&self, key: &str) -> Result<Option<f64>, CliError> {
        if self.get(key) == "auto" {
            Ok(None)
        } else {
            self.positive(key).map(Some)
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.get(key)
            .parse::<usize>()
            .map_err(|_| self.invalid(key, "expected a nonnegative integer"))
    }

    pub fn auto_usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        if self.get(key) == "auto" {
            Ok(None)
        } else {
            self.usize(key).map(Some)
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.get(key)
            .parse::<u64>()
            .map_err(|_| self.invalid(key, "expected a nonnegative integer"))
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(self.invalid(key, "expected true or false")),
        }
    }

    /// Comma-separated items, each mapped by `parse`.
    pub fn list<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
        let items: Vec<&str> = self.get(key).split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        items
            .iter()
            .map(|s| parse(s).ok_or_else(|| self.invalid(key, &format!("cannot parse item '{s}'"))))
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        self.list(key, |s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
    }

    /// A comma-separated list or `start:stop:count` (inclusive, uniform).
    pub fn grid(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let text = self.get(key);
        let parts: Vec<&str> = text.split(':').map(str::trim).collect();
        match parts.as_slice() {
            [start, stop, count] => {
                let (a, b) = (start.parse::<f64>(), stop.parse::<f64>());
                let n = count.parse::<usize>();
                match (a, b, n) {
                    (Ok(a), Ok(b), Ok(1)) if a == b => Ok(vec![a]),
                    (Ok(a), Ok(b), Ok(n)) if n >= 2 && a.is_finite() && b.is_finite() => {
                        Ok((0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect())
                    }
                    _ => Err(self.invalid(key, "expected start:stop:count with count >= 2")),
                }
            }
            [_] => {
                let grid = self.f64_list(key)?;
                if grid.is_empty() {
                    Err(self.invalid(key, "empty grid"))
                } else {
                    Ok(grid)
                }
            }
            _ => Err(self.invalid(key, "expected a list or start:stop:count")),
        }
    }

    pub fn out_dir(&self) -> &Path {
        Path::new(self.get("out"))
    }

    /// Every option with its resolved value, for the manifest.
    pub fn echo(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }
}
