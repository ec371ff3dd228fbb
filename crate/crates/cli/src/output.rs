//! Artifact writers: CSV with 17 significant digits, mixture files, and the
//! run manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use erlang_lct::integrate::Trajectory;
use erlang_lct::kernels::ErlangMixture;

use crate::config::CliError;

/// Round-trip formatting: 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

pub struct Csv {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl Csv {
    pub fn create<S: AsRef<str>>(path: &Path, header: &[S]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        let mut csv = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            columns: header.len(),
        };
        let fields: Vec<&str> = header.iter().map(AsRef::as_ref).collect();
        csv.line(&fields.join(","))?;
        Ok(csv)
    }

    fn line(&mut self, text: &str) -> Result<(), CliError> {
        writeln!(self.out, "{text}").map_err(|e| io_error(&self.path, e))
    }

    pub fn record<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<(), CliError> {
        assert_eq!(fields.len(), self.columns, "CSV record width differs from its header");
        let fields: Vec<&str> = fields.iter().map(AsRef::as_ref).collect();
        self.line(&fields.join(","))
    }

    pub fn numbers(&mut self, values: &[f64]) -> Result<(), CliError> {
        let fields: Vec<String> = values.iter().map(|v| num(*v)).collect();
        self.record(&fields)
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out.flush().map_err(|e| io_error(&self.path, e))
    }
}

/// `t, x1..x{nx}, z1..z{nz}`: the trajectory layout shared by the chain and
/// DDE simulations.
pub fn trajectory_header(nx: usize, nz: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=nx).map(|i| format!("x{i}")))
        .chain((1..=nz).map(|i| format!("z{i}")))
        .collect()
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, nx: usize, nz: usize) -> Result<(), CliError> {
    let mut csv = Csv::create(path, &trajectory_header(nx, nz))?;
    for (t, state) in traj.times.iter().zip(&traj.states) {
        let mut row = Vec::with_capacity(1 + state.len());
        row.push(*t);
        row.extend_from_slice(state);
        csv.numbers(&row)?;
    }
    csv.finish()
}

/// Line 1 is the rate `a`, then one coefficient `c_m` per line.
pub fn write_mixture(path: &Path, mixture: &ErlangMixture) -> Result<(), CliError> {
    let mut text = num(mixture.rate());
    text.push('\n');
    for c in mixture.coeffs() {
        text.push_str(&num(*c));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn read_mixture(path: &Path) -> Result<ErlangMixture, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let bad = |what: String| CliError::Usage(format!("mixture file {}: {what}", path.display()));
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        values.push(
            line.parse::<f64>()
                .map_err(|_| bad(format!("line {}: '{line}' is not a number", i + 1)))?,
        );
    }
    if values.len() < 2 {
        return Err(bad("expected the rate and at least one coefficient".into()));
    }
    ErlangMixture::new(values[0], values[1..].to_vec()).map_err(|e| bad(e.to_string()))
}

/// A value in the manifest.
#[derive(Debug, Clone)]
pub enum Value {
    Num(f64),
    Int(i64),
    Bool(bool),
    Str(String),
}

impl Value {
    fn render(&self) -> String {
        match self {
            Value::Num(v) if v.is_finite() => num(*v),
            Value::Num(v) => quote(&v.to_string()),
            Value::Int(v) => v.to_string(),
            Value::Bool(v) => v.to_string(),
            Value::Str(s) => quote(s),
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Run record written as JSON at the end of every run.
#[derive(Debug, Default)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub config: Vec<(String, String)>,
    pub overrides: Vec<(String, f64)>,
    pub wall_time: f64,
    pub stages: Vec<(String, f64)>,
    pub results: Vec<(String, Value)>,
    pub failures: Vec<String>,
    pub outputs: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn version() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), " (", env!("ERLANG_LCT_GIT_DESCRIBE"), ")")
}

impl Manifest {
    pub fn render(&self) -> String {
        let object = |pairs: Vec<(String, String)>, indent: &str| {
            if pairs.is_empty() {
                return "{}".to_string();
            }
            let body: Vec<String> = pairs.into_iter().map(|(k, v)| format!("{indent}  {}: {v}", quote(&k))).collect();
            format!("{{\n{}\n{indent}}}", body.join(",\n"))
        };
        let array = |items: Vec<String>| {
            if items.is_empty() {
                return "[]".to_string();
            }
            let body: Vec<String> = items.into_iter().map(|v| format!("    {v}")).collect();
            format!("[\n{}\n  ]", body.join(",\n"))
        };
        let fields = vec![
            ("command".to_string(), quote(&self.command)),
            ("version".to_string(), quote(version())),
            ("status".to_string(), quote(&self.status)),
            (
                "config".to_string(),
                object(self.config.iter().map(|(k, v)| (k.clone(), quote(v))).collect(), "  "),
            ),
            (
                "model_parameters".to_string(),
                object(self.overrides.iter().map(|(k, v)| (k.clone(), Value::Num(*v).render())).collect(), "  "),
            ),
            ("wall_time_s".to_string(), Value::Num(self.wall_time).render()),
            (
                "stages".to_string(),
                array(
                    self.stages
                        .iter()
                        .map(|(name, s)| format!("{{\"name\": {}, \"seconds\": {}}}", quote(name), Value::Num(*s).render()))
                        .collect(),
                ),
            ),
            (
                "results".to_string(),
                object(self.results.iter().map(|(k, v)| (k.clone(), v.render())).collect(), "  "),
            ),
            ("failures".to_string(), array(self.failures.iter().map(|f| quote(f)).collect())),
            ("outputs".to_string(), array(self.outputs.iter().map(|f| quote(f)).collect())),
        ];
        let body: Vec<String> = fields.into_iter().map(|(k, v)| format!("  {}: {v}", quote(&k))).collect();
        format!("{{\n{}\n}}\n", body.join(",\n"))
    }

    /// Write to a temporary file in `dir` and rename it into place, so a
    /// manifest is either complete or absent.
    pub fn write_atomic(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let tmp = dir.join(format!(".{MANIFEST}.tmp"));
        let path = dir.join(MANIFEST);
        fs::write(&tmp, self.render()).map_err(|e| io_error(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, 6.02214076e23, -2.5e-300, std::f64::consts::PI] {
            let s = num(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            assert_eq!(s.split('e').next().unwrap().chars().filter(char::is_ascii_digit).count(), 17);
        }
    }

    #[test]
    fn quoting() {
        assert_eq!(quote("a\"b\\c\n"), "\"a\\\"b\\\\c\\n\"");
    }

    #[test]
    fn manifest_shape() {
        let m = Manifest {
            command: "fit-kernel".into(),
            status: "ok".into(),
            config: vec![("order".into(), "8".into())],
            results: vec![("rate".into(), Value::Num(2.0)), ("bad".into(), Value::Num(f64::NAN))],
            outputs: vec!["mixture.txt".into()],
            ..Manifest::default()
        };
        let text = m.render();
        assert!(text.contains("\"order\": \"8\""));
        assert!(text.contains("\"rate\": 2.0000000000000000e0"));
        assert!(text.contains("\"bad\": \"NaN\""));
        assert!(text.contains("\"failures\": []"));
        assert!(text.starts_with('{') && text.trim_end().ends_with('}'));
    }
}
