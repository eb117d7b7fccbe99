//! Flat `key = value` config files, merged into the command line.
//!
//! Each key names a long flag of the chosen subcommand (or a global flag).
//! Keys already given on the command line are skipped, so flags win. Blank
//! lines and lines starting with `#` are ignored.

use std::path::Path;

use clap::Command;
use log::warn;

use faircert_core::{Error, Result};

/// Parses `key = value` lines into ordered pairs.
pub fn parse(text: &str, name: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: name.to_string(),
                line: i as u64 + 1,
                message: format!("expected key = value, found '{line}'"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Value of `--config` in `args`, if present.
fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn given(args: &[String], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefix = format!("--{long}=");
    args.iter().any(|a| *a == flag || a.starts_with(&prefix))
}

/// Appends config entries not overridden on the command line.
pub fn merge(cmd: &Command, args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path)).map_err(|e| Error::Parse {
        path: path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let entries = parse(&text, &path)?;
    let sub = args
        .iter()
        .skip(1)
        .find_map(|a| cmd.get_subcommands().find(|s| s.get_name() == a));
    let known = cmd.get_arguments().chain(sub.into_iter().flat_map(|s| s.get_arguments()));
    let known: Vec<(String, bool)> = known
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .collect();
    let mut merged = args.clone();
    for (key, value) in entries {
        let Some((long, takes_value)) = known.iter().find(|(l, _)| *l == key) else {
            warn!("{path}: ignoring key '{key}' not accepted by this command");
            continue;
        };
        if long == "config" || given(&args, long) {
            continue;
        }
        if *takes_value {
            merged.push(format!("--{long}={value}"));
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => merged.push(format!("--{long}")),
                "false" | "0" | "no" => {}
                other => {
                    return Err(Error::Schema(format!("{path}: '{key}' expects true or false, got '{other}'")));
                }
            }
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let p = parse("# sweep\nrho = 0.1,0.2\n\nscenario=general\n", "c").unwrap();
        assert_eq!(p, vec![("rho".into(), "0.1,0.2".into()), ("scenario".into(), "general".into())]);
        assert!(matches!(parse("rho 0.1", "c"), Err(Error::Parse { line: 1, .. })));
    }
}
