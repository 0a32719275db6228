//! `--config FILE`: a TOML table whose keys are flag names. Its entries are
//! inserted ahead of the command-line flags, so flags given explicitly win.

use std::fs;

use crate::error::CliError;

/// Replaces `--config FILE` (or `--config=FILE`) with the flags it holds.
pub fn expand(args: Vec<String>) -> Result<Vec<String>, CliError> {
    let Some(pos) = args
        .iter()
        .position(|a| a == "--config" || a.starts_with("--config="))
    else {
        return Ok(args);
    };
    let (path, consumed) = match args[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => (
            args.get(pos + 1)
                .cloned()
                .ok_or_else(|| CliError::Config("--config needs a file path".into()))?,
            2,
        ),
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
    let flags = flags_from_toml(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))?;

    let mut rest: Vec<String> = args;
    rest.drain(pos..pos + consumed);
    // Insert right after the subcommand name so the flags parse in its scope.
    let insert_at = rest
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map_or(rest.len(), |i| i + 2);
    let tail = rest.split_off(insert_at.min(rest.len()));
    rest.extend(flags);
    rest.extend(tail);
    Ok(rest)
}

fn flags_from_toml(text: &str) -> Result<Vec<String>, String> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        let rendered = match value {
            toml::Value::Boolean(true) => {
                out.push(flag);
                continue;
            }
            toml::Value::Boolean(false) => continue,
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(i) => Ok(i.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    _ => Err(format!("unsupported list entry for `{key}`")),
                })
                .collect::<Result<Vec<_>, _>>()?
                .join(","),
            _ => return Err(format!("unsupported value for `{key}`")),
        };
        out.push(flag);
        out.push(rendered);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn toml_becomes_flags() {
        let flags =
            flags_from_toml("steps = 10\nlr = 0.01\nhidden = [32, 32]\nsru = true\njson = false\n")
                .unwrap();
        assert_eq!(
            flags,
            args(&["--hidden", "32,32", "--lr", "0.01", "--sru", "--steps", "10"])
        );
    }

    #[test]
    fn config_flags_precede_explicit_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "steps = 10\n").unwrap();
        let p = path.to_str().unwrap();
        let out = expand(args(&[
            "qrnn",
            "train-baseline",
            "--config",
            p,
            "--steps",
            "3",
        ]))
        .unwrap();
        assert_eq!(
            out,
            args(&["qrnn", "train-baseline", "--steps", "10", "--steps", "3"])
        );
    }

    #[test]
    fn no_config_is_untouched() {
        let a = args(&["qrnn", "eval", "--model", "m.qz"]);
        assert_eq!(expand(a.clone()).unwrap(), a);
    }
}
