//! `--config` files: `key = value` lines whose keys are long flag names of
//! the chosen subcommand (`per_texel` and `per-texel` both work). Config
//! values are spliced in front of the command-line flags, so flags given on
//! the command line win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use clap::{CommandFactory, FromArgMatches, Parser};

use crate::Cli;

pub enum ParseError {
    Clap(clap::Error),
    Config(anyhow::Error),
}

/// `(key, value)` pairs in file order.
pub fn read_pairs(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Flags for `pairs`, checked against the subcommand's options.
fn config_args(sub: &clap::Command, pairs: &[(String, String)]) -> anyhow::Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in pairs {
        if matches!(key.as_str(), "config" | "threads" | "deterministic") {
            bail!("`{key}` cannot be set from a config file");
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| anyhow!("unknown config key `{key}` for `{}`", sub.get_name()))?;
        if arg.get_action().takes_values() {
            out.push(format!("--{key}={value}").into());
        } else {
            match value.as_str() {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                _ => bail!("config key `{key}` expects true or false, got `{value}`"),
            }
        }
    }
    Ok(out)
}

pub fn parse_with_config(argv: Vec<OsString>) -> Result<Cli, ParseError> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(&argv).map_err(ParseError::Clap)?;
    let Some(path) = config_path(&argv) else {
        return Cli::from_arg_matches(&matches).map_err(ParseError::Clap);
    };
    let sub_name = matches.subcommand_name().unwrap_or_default().to_string();
    let spliced = (|| -> anyhow::Result<Vec<OsString>> {
        let path = Path::new(&path);
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let pairs = read_pairs(&text).with_context(|| format!("in {}", path.display()))?;
        let sub = cmd.find_subcommand(&sub_name).expect("parsed subcommand exists");
        let extra = config_args(sub, &pairs).with_context(|| format!("in {}", path.display()))?;
        // insert right after the subcommand token
        let mut skip_value = false;
        let mut at = None;
        for (i, a) in argv.iter().enumerate().skip(1) {
            if skip_value {
                skip_value = false;
                continue;
            }
            let s = a.to_string_lossy();
            if s == "--config" || s == "--threads" {
                skip_value = true;
            } else if s == sub_name {
                at = Some(i);
                break;
            }
        }
        let at = at.ok_or_else(|| anyhow!("cannot locate subcommand `{sub_name}`"))?;
        let mut out = argv[..=at].to_vec();
        out.extend(extra);
        out.extend_from_slice(&argv[at + 1..]);
        Ok(out)
    })()
    .map_err(ParseError::Config)?;
    Cli::try_parse_from(spliced).map_err(ParseError::Clap)
}
