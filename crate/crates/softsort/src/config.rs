//! Config files for the command line.
//!
//! A config file is flat TOML: one `key = value` per line, where every key is
//! the long name of a flag of the chosen subcommand (`_` and `-` are
//! interchangeable). Values may be strings, numbers, booleans or arrays:
//!
//! ```toml
//! n_list = [100, 500]
//! operators = "softsort"
//! epochs = 20
//! include_reversed = true
//! ```
//!
//! Each entry becomes `--key value` placed before the flags given on the
//! command line, so explicit flags take precedence. `true` becomes a bare
//! `--key`, `false` drops the entry and arrays are joined with commas.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

fn scalar(key: &str, v: &toml::Value) -> Result<String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        _ => Err(Error::Config(format!("`{key}`: expected a string or number"))),
    }
}

/// Converts the text of a config file into command-line arguments.
pub fn parse_config(text: &str) -> Result<Vec<String>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let mut args = Vec::new();
    for (key, value) in &table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => args.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let parts = items.iter().map(|v| scalar(key, v)).collect::<Result<Vec<_>>>()?;
                args.push(flag);
                args.push(parts.join(","));
            }
            toml::Value::Table(_) => return Err(Error::Config(format!("`{key}`: nested tables are not supported"))),
            other => {
                args.push(flag);
                args.push(scalar(key, other)?);
            }
        }
    }
    Ok(args)
}

pub fn load_config(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Removes a `--config PATH` (or `--config=PATH`) given before the
/// subcommand and returns the path.
pub fn take_config_flag(args: Vec<OsString>) -> (Vec<OsString>, Option<PathBuf>) {
    let mut out = Vec::with_capacity(args.len());
    let mut path = None;
    let mut it = args.into_iter();
    out.extend(it.next());
    while let Some(a) = it.next() {
        let text = a.to_string_lossy();
        if text == "--config" {
            path = it.next().map(PathBuf::from);
        } else if let Some(p) = text.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            let is_flag = text.starts_with('-');
            out.push(a);
            if !is_flag {
                out.extend(it);
                break;
            }
        }
    }
    (out, path)
}

/// Splices config arguments in right after the subcommand, which is the
/// first argument after the program name not starting with `-`.
pub fn splice_args(args: Vec<OsString>, config: Vec<String>) -> Vec<OsString> {
    if config.is_empty() {
        return args;
    }
    let pos = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 2);
    let pos = pos.unwrap_or(args.len());
    let mut out = args[..pos].to_vec();
    out.extend(config.into_iter().map(OsString::from));
    out.extend_from_slice(&args[pos..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_become_flags() {
        let args = parse_config("n_list = [100, 500]\nepochs = 3\ntau = 0.5\nout = \"x.csv\"\nverbose = true\nquiet = false\n")
            .unwrap();
        assert_eq!(args, ["--n-list", "100,500", "--epochs", "3", "--tau", "0.5", "--out", "x.csv", "--verbose"]);
    }

    #[test]
    fn nested_tables_are_rejected() {
        assert!(matches!(parse_config("[a]\nb = 1\n"), Err(Error::Config(_))));
        assert!(matches!(parse_config("a = = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn splice_goes_after_subcommand() {
        let args: Vec<OsString> =
            ["softsort", "--config", "c.toml", "bench", "--epochs", "5", "--config", "x"].map(Into::into).to_vec();
        let (args, path) = take_config_flag(args);
        assert_eq!(path.unwrap(), PathBuf::from("c.toml"));
        let out = splice_args(args, vec!["--epochs".into(), "2".into()]);
        let out: Vec<_> = out.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(out, ["softsort", "bench", "--epochs", "2", "--epochs", "5", "--config", "x"]);
    }
}
