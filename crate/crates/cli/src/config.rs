//! `key=value` config files merged into the command line.
//!
//! Keys are long flag names without the leading dashes. Values from the file
//! are spliced in ahead of the user's own flags, and every flag keeps its
//! last occurrence, so the command line wins on conflict.

use std::ffi::OsString;
use std::path::Path;

use clap::Command;

const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--seed", "--config", "--workers"];

pub fn parse_file(path: &Path) -> Result<Vec<(String, String)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
        out.push((k.trim().trim_start_matches("--").to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Finds the `--config` value and the index of the subcommand token.
fn scan(args: &[OsString]) -> (Option<String>, Option<usize>) {
    let mut config = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        } else if GLOBAL_VALUE_FLAGS.contains(&a.as_ref()) {
            if a == "--config" {
                config = args.get(i + 1).map(|v| v.to_string_lossy().into_owned());
            }
            i += 1;
        } else if !a.starts_with('-') {
            return (config, Some(i));
        }
        i += 1;
    }
    (config, None)
}

fn long_names(cmd: &Command) -> Vec<String> {
    cmd.get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect()
}

/// Returns `args` with the config file's entries spliced in. Keys belonging
/// to a different subcommand are ignored; keys unknown to every subcommand
/// are an error.
pub fn merge(cli: &Command, args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let (Some(path), sub_index) = scan(&args) else {
        return Ok(args);
    };
    let entries = parse_file(Path::new(&path))?;
    let globals = long_names(cli);
    let sub = sub_index.and_then(|i| {
        let name = args[i].to_string_lossy().into_owned();
        cli.find_subcommand(&name).map(|c| (i, long_names(c)))
    });
    let mut before = Vec::new();
    let mut after = Vec::new();
    for (key, value) in entries {
        let flag = [OsString::from(format!("--{key}")), OsString::from(value)];
        if key == "config" {
            return Err(format!("{path}: a config file cannot name another config file"));
        } else if globals.contains(&key) {
            before.extend(flag);
        } else if sub.as_ref().is_some_and(|(_, names)| names.contains(&key)) {
            after.extend(flag);
        } else if !cli.get_subcommands().any(|c| long_names(c).contains(&key)) {
            return Err(format!("{path}: unknown key `{key}`"));
        }
    }
    let mut merged = vec![args[0].clone()];
    merged.extend(before);
    match sub {
        Some((i, _)) => {
            merged.extend(args[1..=i].iter().cloned());
            merged.extend(after);
            merged.extend(args[i + 1..].iter().cloned());
        }
        None => merged.extend(args[1..].iter().cloned()),
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_config_and_subcommand() {
        let args: Vec<OsString> = ["rdunet", "--seed", "3", "--config=c.txt", "sweep", "--pred", "x"]
            .iter()
            .map(OsString::from)
            .collect();
        assert_eq!(scan(&args), (Some("c.txt".into()), Some(4)));
    }
}
