//! Config files that mirror command-line flags.
//!
//! ```toml
//! seed = 7                 # any subcommand with --seed
//!
//! [build]
//! manifest = "sources.toml"
//! test-size = 500
//! stratify = true
//!
//! [report]
//! system = { baseline = "base.json", tuned = "tuned.json" }
//! ```
//!
//! Keys may use `-` or `_`. Booleans become bare flags, arrays repeat the
//! flag and tables become repeated `KEY=VALUE` arguments. The generated
//! arguments are placed before the explicit ones, so explicit flags win.

use std::ffi::OsString;
use std::path::Path;

use clap::CommandFactory;
use serde_json::Value;

use crate::args::Cli;
use crate::error::{CliError, Result};

const GLOBAL_FLAGS_WITH_VALUE: &[&str] = &["--config"];

fn load(path: &Path) -> Result<serde_json::Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("reading config {}: {e}", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e == "toml") {
        let t: toml::Value = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| CliError::Usage(e.to_string()))?
    } else {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Usage(format!(
            "config {} must be a table",
            path.display()
        ))),
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Flag arguments for one `key = value` entry, given whether the flag takes
/// a value.
fn to_args(flag: &str, value: &Value, takes_value: bool) -> Result<Vec<OsString>> {
    let bad = || {
        CliError::Usage(format!(
            "config value for {flag} has the wrong type: {value}"
        ))
    };
    let mut out = Vec::new();
    if !takes_value {
        match value {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) => {}
            _ => return Err(bad()),
        }
        return Ok(out);
    }
    let mut push = |v: String| {
        out.push(OsString::from(flag));
        out.push(OsString::from(v));
    };
    match value {
        Value::Array(items) => {
            for item in items {
                push(scalar(item).ok_or_else(bad)?);
            }
        }
        Value::Object(map) => {
            for (k, v) in map {
                push(format!("{k}={}", scalar(v).ok_or_else(bad)?));
            }
        }
        other => push(scalar(other).ok_or_else(bad)?),
    }
    Ok(out)
}

/// Position of the subcommand name in `argv`, skipping global flags.
fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if GLOBAL_FLAGS_WITH_VALUE.contains(&a.as_ref()) {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut found = None;
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--config" {
            found = argv.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(rest) = a.strip_prefix("--config=") {
            found = Some(OsString::from(rest));
        }
        i += 1;
    }
    found
}

/// Expand `--config` into explicit arguments placed right after the
/// subcommand name.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(sub_at) = subcommand_index(&argv) else {
        return Ok(argv);
    };
    let sub_name = argv[sub_at].to_string_lossy().into_owned();
    let root = Cli::command();
    let Some(sub) = root.find_subcommand(&sub_name) else {
        // Let clap report the unknown subcommand.
        return Ok(argv);
    };
    let takes_value = |long: &str| -> Option<bool> {
        sub.get_arguments()
            .find(|a| a.get_long() == Some(long) && !a.is_global_set())
            .map(|a| a.get_action().takes_values())
    };

    let table = load(Path::new(&path))?;
    let is_subcommand = |k: &str| root.get_subcommands().any(|s| s.get_name() == k);
    let mut extra = Vec::new();
    for (key, value) in &table {
        if is_subcommand(key) || matches!(key.as_str(), "config" | "verbose" | "quiet") {
            continue;
        }
        let long = key.replace('_', "-");
        if let Some(tv) = takes_value(&long) {
            extra.extend(to_args(&format!("--{long}"), value, tv)?);
        } else if !root.get_subcommands().any(|s| {
            s.get_arguments()
                .any(|a| a.get_long() == Some(long.as_str()))
        }) {
            return Err(CliError::Usage(format!("unknown config key '{key}'")));
        }
    }
    if let Some(section) = table.get(&sub_name) {
        let Value::Object(section) = section else {
            return Err(CliError::Usage(format!(
                "config section [{sub_name}] must be a table"
            )));
        };
        for (key, value) in section {
            let long = key.replace('_', "-");
            let tv = takes_value(&long)
                .ok_or_else(|| CliError::Usage(format!("unknown config key '{sub_name}.{key}'")))?;
            extra.extend(to_args(&format!("--{long}"), value, tv)?);
        }
    }

    let mut out: Vec<OsString> = argv[..=sub_at].to_vec();
    out.extend(extra);
    out.extend(argv[sub_at + 1..].iter().cloned());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    fn with_config(text: &str, ext: &str, argv: &[&str]) -> Result<Vec<OsString>> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("cfg.{ext}"));
        std::fs::write(&path, text).unwrap();
        let mut full = os(argv);
        full.push("--config".into());
        full.push(path.clone().into());
        expand(full)
    }

    #[test]
    fn toml_sections_and_globals_expand() {
        let argv = with_config(
            "seed = 9\n[build]\nmanifest = \"m.toml\"\nout_dir = \"out\"\nstratify = true\nlabel-alias = [\"a=b\", \"c=d\"]\n",
            "toml",
            &["bench", "build"],
        )
        .unwrap();
        let cli = Cli::try_parse_from(argv).unwrap();
        let crate::args::Command::Build(b) = cli.command else {
            panic!()
        };
        assert_eq!(b.seed, 9);
        assert!(b.stratify);
        assert_eq!(b.manifest, Path::new("m.toml"));
        assert_eq!(b.label_alias, vec!["a=b", "c=d"]);
    }

    #[test]
    fn explicit_flags_override_config() {
        let argv = with_config(
            "{\"build\": {\"manifest\": \"m.toml\", \"out-dir\": \"o\", \"test-size\": 5}}",
            "json",
            &["bench", "build", "--test-size", "7"],
        )
        .unwrap();
        let crate::args::Command::Build(b) = Cli::try_parse_from(argv).unwrap().command else {
            panic!()
        };
        assert_eq!(b.test_size, 7);
    }

    #[test]
    fn tables_become_key_value_flags() {
        let argv = with_config(
            "[report]\nsystem = { base = \"a.json\" }\n",
            "toml",
            &["bench", "report"],
        )
        .unwrap();
        let crate::args::Command::Report(r) = Cli::try_parse_from(argv).unwrap().command else {
            panic!()
        };
        assert_eq!(r.system, vec!["base=a.json"]);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = with_config("[build]\nbogus = 1\n", "toml", &["bench", "build"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = with_config("bogus = 1\n", "toml", &["bench", "build"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn global_keys_skip_subcommands_without_them() {
        // `seed` exists on build and manifest but not on report.
        let argv = with_config(
            "seed = 3\n[report]\nsystem = [\"x.json\"]\n",
            "toml",
            &["bench", "report"],
        )
        .unwrap();
        assert!(Cli::try_parse_from(argv).is_ok());
    }
}
