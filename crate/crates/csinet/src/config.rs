//! Optional `key=value` run configuration.
//!
//! Keys are long flag names of the chosen command (`epochs = 20`, `arch =
//! shufflecsinet`). `#` starts a comment. Boolean flags take `true` or
//! `false`. Values from the file are placed before the command-line flags,
//! so explicit flags win.

use std::collections::BTreeSet;

use anyhow::{anyhow, bail, Result};
use clap::{ArgAction, Command};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses the document; repeated keys are an error.
pub fn parse(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected key=value, got '{raw}'", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        if !seen.insert(key.clone()) {
            bail!("config line {}: key '{key}' repeated", i + 1);
        }
        out.push(ConfigEntry { line: i + 1, key, value: v.trim().to_string() });
    }
    Ok(out)
}

/// Converts entries to flags accepted by `command`. Unknown keys and
/// positional or help arguments are rejected.
pub fn to_args(entries: &[ConfigEntry], command: &Command) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for e in entries {
        let arg = command
            .get_arguments()
            .find(|a| a.get_long() == Some(e.key.as_str()))
            .filter(|a| !matches!(a.get_action(), ArgAction::Help | ArgAction::Version) && a.get_id() != "config")
            .ok_or_else(|| anyhow!("config line {}: unknown key '{}' for command '{}'", e.line, e.key, command.get_name()))?;
        match arg.get_action() {
            ArgAction::SetTrue => match e.value.as_str() {
                "true" => args.push(format!("--{}", e.key)),
                "false" => {}
                v => bail!("config line {}: '{}' expects true or false, got '{v}'", e.line, e.key),
            },
            _ => {
                args.push(format!("--{}", e.key));
                args.push(e.value.clone());
            }
        }
    }
    Ok(args)
}
