//! `key = value` settings resolved from built-in defaults, the `MPDL_SEED`
//! environment variable (seed only), an optional config file and
//! command-line flags, in increasing priority.

use std::collections::BTreeMap;
use std::fmt;

use mpdl_core::dp::SensitivityMode;
use mpdl_core::transport::Backend;

use crate::CliError;

/// Where a resolved value came from; echoed into outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    Env,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::Env => "env",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// Parses a flat config file. Blank lines and `#` comments are skipped;
/// `-` in keys reads as `_`.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Invalid(format!("config line {}: expected `key = value`", n + 1)));
        };
        let key = key.trim().replace('-', "_");
        if key.is_empty() {
            return Err(CliError::Invalid(format!("config line {}: empty key", n + 1)));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(CliError::Invalid(format!("config line {}: duplicate key {key:?}", n + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Fully resolved settings of one subcommand.
#[derive(Clone, Debug)]
pub struct Settings {
    values: BTreeMap<&'static str, (String, Source)>,
}

impl Settings {
    /// `defaults` fixes the set of known keys; file keys outside it are
    /// errors.
    pub fn resolve(
        defaults: &[(&'static str, String)],
        env_seed: Option<String>,
        file: &[(String, String)],
        flags: &[(&'static str, Option<String>)],
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<&'static str, (String, Source)> =
            defaults.iter().map(|(k, v)| (*k, (v.clone(), Source::Default))).collect();
        if let (Some(seed), Some(slot)) = (env_seed, values.get_mut("seed")) {
            *slot = (seed, Source::Env);
        }
        for (key, value) in file {
            match values.get_mut(key.as_str()) {
                Some(slot) => *slot = (value.clone(), Source::File),
                None => return Err(CliError::Invalid(format!("unknown config key {key:?}"))),
            }
        }
        for (key, value) in flags {
            if let Some(v) = value {
                let slot = values
                    .get_mut(key)
                    .unwrap_or_else(|| panic!("flag {key} has no default"));
                *slot = (v.clone(), Source::Flag);
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values.get(key).unwrap_or_else(|| panic!("unknown setting {key}")).0
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        self.raw(key)
            .parse()
            .map_err(|_| CliError::Invalid(format!("{key} = {:?} is not {what}", self.raw(key))))
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse(key, "a number")?;
        if !v.is_finite() {
            return Err(CliError::Invalid(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parse(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parse(key, "a non-negative integer")
    }

    pub fn u32(&self, key: &str) -> Result<u32, CliError> {
        self.parse(key, "a non-negative integer")
    }

    pub fn epsilon(&self, key: &str) -> Result<f64, CliError> {
        parse_epsilon(self.raw(key)).map_err(|e| CliError::Invalid(format!("{key}: {e}")))
    }

    /// Comma-separated numbers; empty entries are errors.
    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        split_list(self.raw(key))
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::Invalid(format!("{key}: {s:?} is not a number")))
            })
            .collect()
    }

    pub fn epsilon_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        split_list(self.raw(key))
            .map(|s| parse_epsilon(s).map_err(|e| CliError::Invalid(format!("{key}: {e}"))))
            .collect()
    }

    pub fn string_list(&self, key: &str) -> Vec<String> {
        if self.raw(key).trim().is_empty() {
            return Vec::new();
        }
        split_list(self.raw(key)).map(str::to_string).collect()
    }

    pub fn sensitivity_mode(&self, key: &str) -> Result<SensitivityMode, CliError> {
        self.raw(key).parse().map_err(|e| CliError::Invalid(format!("{key}: {e}")))
    }

    pub fn backend(&self, key: &str) -> Result<Backend, CliError> {
        match self.raw(key) {
            "in_process" | "in-process" => Ok(Backend::InProcess),
            "tcp" => Ok(Backend::Tcp),
            other => Err(CliError::Invalid(format!("{key}: unknown backend {other:?}"))),
        }
    }

    /// `# key = value (source)` lines in key order.
    pub fn echo(&self) -> Vec<String> {
        self.values
            .iter()
            .map(|(k, (v, src))| format!("# {k} = {v} ({src})"))
            .collect()
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim)
}

/// A positive budget, or `inf` for no perturbation.
pub fn parse_epsilon(s: &str) -> Result<f64, String> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("epsilon {s:?} must be a positive number or inf")),
    }
}

pub fn format_epsilon(eps: f64) -> String {
    if eps.is_infinite() {
        "inf".into()
    } else {
        eps.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> Vec<(&'static str, String)> {
        vec![("seed", "0".into()), ("gamma", "0.1".into()), ("lr", "0.1".into())]
    }

    #[test]
    fn flags_beat_file_beat_env_beat_defaults() {
        let file = parse_config_file("# comment\ngamma = 0.3\nseed=5\n").unwrap();
        let s = Settings::resolve(&defaults(), Some("9".into()), &file, &[("seed", Some("7".into()))]).unwrap();
        assert_eq!(s.raw("seed"), "7");
        assert_eq!(s.raw("gamma"), "0.3");
        assert_eq!(s.raw("lr"), "0.1");

        let s = Settings::resolve(&defaults(), Some("9".into()), &[], &[("seed", None)]).unwrap();
        assert_eq!(s.raw("seed"), "9");
        let s = Settings::resolve(&defaults(), Some("9".into()), &file, &[]).unwrap();
        assert_eq!(s.raw("seed"), "5");
    }

    #[test]
    fn unknown_and_malformed_file_entries_are_rejected() {
        let file = parse_config_file("colour = red\n").unwrap();
        assert!(Settings::resolve(&defaults(), None, &file, &[]).is_err());
        assert!(parse_config_file("just words\n").is_err());
        assert!(parse_config_file(" = 3\n").is_err());
        assert!(parse_config_file("a = 1\na = 2\n").is_err());
        assert_eq!(parse_config_file("dual-epochs = 3").unwrap()[0].0, "dual_epochs");
    }

    #[test]
    fn epsilon_tokens() {
        assert_eq!(parse_epsilon("inf").unwrap(), f64::INFINITY);
        assert_eq!(parse_epsilon(" 0.5 ").unwrap(), 0.5);
        assert!(parse_epsilon("0").is_err());
        assert!(parse_epsilon("-1").is_err());
        assert!(parse_epsilon("nan").is_err());
        assert_eq!(format_epsilon(f64::INFINITY), "inf");
        assert_eq!(format_epsilon(2.0), "2");
    }

    #[test]
    fn typed_getters() {
        let s = Settings::resolve(
            &[("list", "0.1, 0.2".into()), ("n", "x".into()), ("eps", "1,inf".into())],
            None,
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(s.f64_list("list").unwrap(), vec![0.1, 0.2]);
        assert_eq!(s.epsilon_list("eps").unwrap(), vec![1.0, f64::INFINITY]);
        assert!(matches!(s.usize("n"), Err(CliError::Invalid(_))));
    }
}
