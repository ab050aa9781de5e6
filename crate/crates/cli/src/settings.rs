//! Key-value settings files.
//!
//! One `key = value` pair per line. Blank lines and lines starting with `#`
//! are ignored. Keys are the long flag names (`seed`, `windows`, ...).
//! Values given on the command line or through `DRIVESQL_*` variables win
//! over the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use drivesql::task_sql::RiskThresholds;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default)]
pub struct KeyValueFile {
    path: PathBuf,
    /// key -> (line number, raw value)
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValueFile {
    pub fn parse(path: &Path, text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::in_file(
                    path,
                    format_args!("line {lineno}: expected `key = value`"),
                ));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(CliError::in_file(
                    path,
                    format_args!("line {lineno}: empty key"),
                ));
            }
            if let Some((first, _)) =
                entries.insert(key.clone(), (lineno, value.trim().to_string()))
            {
                return Err(CliError::in_file(
                    path,
                    format_args!("line {lineno}: key `{key}` already set on line {first}"),
                ));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn reject_unknown(&self, known: &[&str]) -> CliResult<()> {
        match self
            .entries
            .iter()
            .find(|(k, _)| !known.contains(&k.as_str()))
        {
            Some((key, (line, _))) => Err(CliError::in_file(
                &self.path,
                format_args!(
                    "line {line}: unknown key `{key}` (expected one of: {})",
                    known.join(", ")
                ),
            )),
            None => Ok(()),
        }
    }

    pub fn get<T>(&self, key: &str) -> CliResult<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((line, raw)) = self.entries.get(key) else {
            return Ok(None);
        };
        raw.parse().map(Some).map_err(|e| {
            CliError::in_file(&self.path, format_args!("line {line}: field `{key}`: {e}"))
        })
    }
}

/// Flag (or environment) value first, then the settings file.
pub fn resolve<T>(flag: Option<T>, file: Option<&KeyValueFile>, key: &str) -> CliResult<Option<T>>
where
    T: FromStr,
    T::Err: Display,
{
    match (flag, file) {
        (Some(v), _) => Ok(Some(v)),
        (None, Some(f)) => f.get(key),
        (None, None) => Ok(None),
    }
}

/// Reads a thresholds file with keys `dis`, `dis_x`, `dis_y` and `s`.
/// Missing keys keep their defaults.
pub fn load_thresholds(path: &Path) -> CliResult<RiskThresholds> {
    let file = KeyValueFile::load(path)?;
    file.reject_unknown(&["dis", "dis_x", "dis_y", "s"])?;
    let mut th = RiskThresholds::default();
    for (key, slot) in [
        ("dis", &mut th.dis),
        ("dis_x", &mut th.dis_x),
        ("dis_y", &mut th.dis_y),
        ("s", &mut th.s),
    ] {
        if let Some(v) = file.get::<f64>(key)? {
            *slot = v;
        }
    }
    th.validate().map_err(|e| CliError::in_file(path, e))?;
    Ok(th)
}

/// Comma-separated list parsed item by item.
#[derive(Debug, Clone, PartialEq)]
pub struct CommaList<T>(pub Vec<T>);

impl<T> FromStr for CommaList<T>
where
    T: FromStr,
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| x.parse::<T>().map_err(|e| format!("'{x}': {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(CommaList)
    }
}
