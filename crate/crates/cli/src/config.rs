//! Flat `key = value` configuration files.
//!
//! Keys are long flag names (`h_gamma` and `h-gamma` are the same key).
//! File settings are turned into flags placed before the command-line
//! flags, so anything given on the command line wins.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: PathBuf, line: usize },
    #[error("--config needs a path")]
    MissingPath,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse(text: &str, path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(a, b)| (a.trim(), b.trim()))
            .filter(|(a, _)| !a.is_empty())
            .ok_or_else(|| ConfigError::Syntax { path: path.to_path_buf(), line: k + 1 })?;
        out.push((key.replace('_', "-"), value.to_string()));
    }
    Ok(out)
}

fn to_flags(pairs: Vec<(String, String)>) -> Vec<String> {
    let mut flags = Vec::new();
    for (key, value) in pairs {
        match value.to_ascii_lowercase().as_str() {
            "true" => flags.push(format!("--{key}")),
            "false" => {}
            _ => {
                flags.push(format!("--{key}"));
                flags.push(value);
            }
        }
    }
    flags
}

/// Removes `--config PATH` from `args` (after the subcommand) and splices
/// the file's settings in its place ahead of the remaining flags.
pub fn expand(args: Vec<String>) -> Result<Vec<String>, ConfigError> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or(ConfigError::MissingPath)?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
    let flags = to_flags(parse(&text, &path)?);
    // binary name and subcommand come first
    let split = rest.len().min(2);
    let mut out: Vec<String> = rest[..split].to_vec();
    out.extend(flags);
    out.extend_from_slice(&rest[split..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn parses_comments_and_booleans() {
        let pairs = parse("# header\nh_gamma = 0.2  # small\n\nwarm-start = true\nverbose=false\n", Path::new("c")).unwrap();
        assert_eq!(to_flags(pairs), s(&["--h-gamma", "0.2", "--warm-start"]));
        assert!(matches!(parse("novalue\n", Path::new("c")), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse(" = 3\n", Path::new("c")), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn file_settings_precede_flags() {
        let dir = std::env::temp_dir().join(format!("ypt-config-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("fit.conf");
        std::fs::write(&file, "h_gamma = 0.5\ndegree = 1\n").unwrap();
        let args = s(&["ypt", "fit", "--input", "d.csv", "--config", file.to_str().unwrap(), "--h-gamma", "0.3"]);
        let out = expand(args).unwrap();
        assert_eq!(out, s(&["ypt", "fit", "--h-gamma", "0.5", "--degree", "1", "--input", "d.csv", "--h-gamma", "0.3"]));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_file_names_path() {
        let err = expand(s(&["ypt", "fit", "--config", "/no/such/file.conf"])).unwrap_err();
        assert!(err.to_string().contains("/no/such/file.conf"));
    }
}
