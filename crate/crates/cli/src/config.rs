//! Experiment manifests: a TOML file supplies flags the command line omits.
//!
//! Top-level keys apply to every subcommand; a `[<subcommand>]` table
//! applies to that one only. Keys are flag names without the leading dashes.

use std::fs;

use toml::{Table, Value};

/// Returns `args` with flags from the `--config` file spliced in after the
/// subcommand, skipping every flag already given on the command line.
pub fn expand(args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&args)? else {
        return Ok(args);
    };
    let Some(sub) = args.get(1).cloned() else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config `{path}`: {e}"))?;
    let table: Table = text.parse().map_err(|e: toml::de::Error| format!("config `{path}`: {}", e.message()))?;

    let mut entries: Vec<(String, Value)> = Vec::new();
    for (k, v) in &table {
        match v {
            Value::Table(t) if *k == sub => entries.extend(t.iter().map(|(k, v)| (k.clone(), v.clone()))),
            Value::Table(_) => {}
            _ => entries.push((k.clone(), v.clone())),
        }
    }

    let mut injected = Vec::new();
    for (key, value) in entries {
        if key == "config" || given(&args, &key) {
            continue;
        }
        let flag = format!("--{key}");
        match value {
            Value::Boolean(true) => injected.push(flag),
            Value::Boolean(false) => {}
            Value::Array(items) => {
                for item in items {
                    injected.push(flag.clone());
                    injected.push(scalar(&key, &item)?);
                }
            }
            other => {
                injected.push(flag);
                injected.push(scalar(&key, &other)?);
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

fn config_path(args: &[String]) -> Result<Option<String>, String> {
    let mut it = args.iter().skip(2);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned().map(Some).ok_or_else(|| "--config needs a path".to_string());
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Ok(Some(p.to_string()));
        }
    }
    Ok(None)
}

fn given(args: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    args.iter().skip(2).any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
}

fn scalar(key: &str, v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(f.to_string()),
        Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(format!("config key `{key}` must be a string, number, boolean or array of those")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn command_line_wins_and_sections_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "seed = 3\nmembers = 2\n[gen-data]\nscenario = \"low\"\nmonths = 24\n[train]\nsteps = 9\n",
        )
        .unwrap();
        let args = argv(&format!("fb gen-data --config {} --seed 7", path.display()));
        let out = expand(args).unwrap();
        let joined = out.join(" ");
        assert!(joined.contains("--scenario low"));
        assert!(joined.contains("--months 24"));
        assert!(joined.contains("--members 2"));
        assert!(!joined.contains("--steps"));
        assert!(!joined.contains("--seed 3"));
        assert!(joined.ends_with("--seed 7"));
    }

    #[test]
    fn arrays_repeat_the_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "train = [\"a.fbch\", \"b.fbch\"]\nno-flow = true\nland-only = false\n").unwrap();
        let out = expand(argv(&format!("fb train --config={}", path.display()))).unwrap();
        let want = argv("--train a.fbch --train b.fbch");
        assert!(out.windows(4).any(|w| w == want.as_slice()));
        assert!(out.contains(&"--no-flow".to_string()));
        assert!(!out.contains(&"--land-only".to_string()));
    }
}
