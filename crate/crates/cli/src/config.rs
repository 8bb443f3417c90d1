//! `key = value` config files merged ahead of command-line flags.

use std::fs;
use std::path::Path;

use clap::Command;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Line { path: String, line: usize, msg: String },
}

/// Parse `key = value` lines. Blank lines and `#` comments are skipped;
/// keys may use `-` or `_`.
pub fn parse(text: &str, path: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Line {
            path: path.into(),
            line: i + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(ConfigError::Line {
                path: path.into(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((i + 1, key, v.trim().to_string()));
    }
    Ok(out)
}

/// Translate config entries into flags of `sub`. Unknown keys are rejected.
pub fn to_flags(entries: &[(usize, String, String)], sub: &Command, path: &str) -> Result<Vec<String>, ConfigError> {
    let mut flags = Vec::new();
    for (line, key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| ConfigError::Line {
                path: path.into(),
                line: *line,
                msg: format!("unknown key '{key}' for '{}'", sub.get_name()),
            })?;
        if arg.get_action().takes_values() {
            flags.push(format!("--{key}={value}"));
        } else {
            match value.as_str() {
                "true" => flags.push(format!("--{key}")),
                "false" => {}
                other => {
                    return Err(ConfigError::Line {
                        path: path.into(),
                        line: *line,
                        msg: format!("'{key}' expects true or false, got '{other}'"),
                    })
                }
            }
        }
    }
    Ok(flags)
}

/// Expand `--config FILE` in `argv`: the file's flags are inserted right
/// after the subcommand so that explicit flags override them.
pub fn expand(argv: Vec<String>, cmd: &Command) -> Result<Vec<String>, ConfigError> {
    let Some(sub_pos) = argv.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(argv);
    };
    let Some(sub) = cmd.find_subcommand(&argv[sub_pos]) else {
        return Ok(argv);
    };
    let mut path = None;
    let mut rest = Vec::new();
    let mut it = argv[sub_pos + 1..].iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = it.next().cloned();
            if path.is_none() {
                rest.push(a.clone());
            }
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a.clone());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = fs::read_to_string(Path::new(&path)).map_err(|source| ConfigError::Io {
        path: path.clone(),
        source,
    })?;
    let flags = to_flags(&parse(&text, &path)?, sub, &path)?;
    let mut out = argv[..=sub_pos].to_vec();
    out.extend(flags);
    out.extend(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Arg, ArgAction};

    fn cmd() -> Command {
        Command::new("t").subcommand(
            Command::new("train")
                .arg(Arg::new("epochs").long("epochs"))
                .arg(Arg::new("lambda-loc").long("lambda-loc"))
                .arg(Arg::new("deterministic").long("deterministic").action(ArgAction::SetTrue)),
        )
    }

    #[test]
    fn comments_and_underscores() {
        let e = parse("# header\n\nepochs = 5 # trailing\nlambda_loc=0.5\n", "c").unwrap();
        assert_eq!(e, vec![(3, "epochs".into(), "5".into()), (4, "lambda-loc".into(), "0.5".into())]);
        let c = cmd();
        let sub = c.find_subcommand("train").unwrap();
        assert_eq!(to_flags(&e, sub, "c").unwrap(), vec!["--epochs=5", "--lambda-loc=0.5"]);
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = parse("epochs = 5\n\nwarmup = 3\n", "run.cfg").unwrap();
        let c = cmd();
        let err = to_flags(&e, c.find_subcommand("train").unwrap(), "run.cfg").unwrap_err();
        assert_eq!(err.to_string(), "run.cfg:3: unknown key 'warmup' for 'train'");
    }

    #[test]
    fn missing_equals_reports_line() {
        let err = parse("epochs 5\n", "c").unwrap_err();
        assert!(err.to_string().starts_with("c:1:"), "{err}");
    }

    #[test]
    fn switches() {
        let c = cmd();
        let sub = c.find_subcommand("train").unwrap();
        let e = parse("deterministic = true\n", "c").unwrap();
        assert_eq!(to_flags(&e, sub, "c").unwrap(), vec!["--deterministic"]);
        let e = parse("deterministic = yes\n", "c").unwrap();
        assert!(to_flags(&e, sub, "c").is_err());
    }
}
