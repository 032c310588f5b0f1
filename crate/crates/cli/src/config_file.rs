//! `--config` files: one `key=value` per line, `#` comments. Keys are long
//! flag names (`offset-max` or `offset_max`). Entries are spliced in ahead of
//! the command-line flags, so a flag given on the command line wins.

use std::fs;

use clap::CommandFactory;

use crate::args::Cli;
use crate::Failure;

pub fn expand(argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text =
        fs::read_to_string(&path).map_err(|e| Failure::Runtime(anyhow::anyhow!("reading config {path}: {e}")))?;
    let cli = Cli::command();
    let sub = cli
        .find_subcommand(&argv[1])
        .ok_or_else(|| Failure::Usage(format!("unknown subcommand `{}`", argv[1])))?;

    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Failure::Usage(format!("{path}:{}: {msg}", n + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got `{line}`")))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            return Err(bad("config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| bad(format!("unknown key `{key}` for `{}`", argv[1])))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}={value}"));
        } else {
            match value {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                other => return Err(bad(format!("`{key}` expects true or false, got `{other}`"))),
            }
        }
    }
    let mut out = Vec::with_capacity(argv.len() + injected.len());
    out.extend_from_slice(&argv[..2]);
    out.extend(injected);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// The `--config` value following the subcommand, if any.
fn config_path(argv: &[String]) -> Option<String> {
    if argv.len() < 2 || argv[1].starts_with('-') {
        return None;
    }
    let mut it = argv[2..].iter();
    let mut found = None;
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            found = it.next().cloned();
        } else if let Some(v) = a.strip_prefix("--config=") {
            found = Some(v.to_string());
        }
    }
    found
}
