//! Flat `key=value` config files. Keys are long flag names (dashes or
//! underscores); the file is spliced into the argument list right after the
//! subcommand, so flags given on the command line override it.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, ArgMatches, Command};

use crate::Failure;

/// Flags that never enter the provenance comment: they name outputs or
/// tune execution without changing any number.
const NOT_PROVENANCE: &[&str] = &["config", "threads", "error-json", "out", "out-dir", "targets-out"];

/// Returns `args` with the config file of the subcommand, if any, expanded
/// into flags.
pub fn splice(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let Some(sub_pos) = args
        .iter()
        .position(|a| a.to_str().is_some_and(|s| cmd.find_subcommand(s).is_some()))
    else {
        return Ok(args);
    };
    let sub = cmd
        .find_subcommand(args[sub_pos].to_str().expect("matched as str"))
        .expect("subcommand exists");
    let Some(path) = config_path(&args[sub_pos + 1..]) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::Io(format!("cannot read config {}: {e}", path.display())))?;
    let extra = expand(sub, &text, &path)?;
    let mut out = args[..=sub_pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub_pos + 1..]);
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<std::path::PathBuf> {
    let mut it = args.iter();
    let mut found = None;
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            found = it.next().map(Into::into);
        } else if let Some(p) = a.strip_prefix("--config=") {
            found = Some(p.into());
        }
    }
    found
}

fn expand(sub: &Command, text: &str, path: &Path) -> Result<Vec<OsString>, Failure> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{}:{}", path.display(), lineno + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}: expected key=value", at())))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long().is_some_and(|l| l.replace('_', "-") == key))
            .filter(|_| key != "config")
            .ok_or_else(|| Failure::Usage(format!("{}: unknown config key {key:?}", at())))?;
        let flag = format!("--{}", arg.get_long().expect("found by long name"));
        match arg.get_action() {
            ArgAction::SetTrue => match value {
                "true" => out.push(flag.into()),
                "false" => {}
                _ => return Err(Failure::Usage(format!("{}: {key} expects true or false", at()))),
            },
            _ => {
                out.push(flag.into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

/// `config: command=... key=value ...` from the resolved arguments, in
/// declaration order, defaults included.
pub fn provenance(sub: &Command, matches: &ArgMatches) -> String {
    let mut parts = vec![format!("command={}", sub.get_name())];
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        if NOT_PROVENANCE.contains(&long) {
            continue;
        }
        let id = arg.get_id().as_str();
        if let Ok(Some(raw)) = matches.try_get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            parts.push(format!("{long}={}", vals.join(",")));
        }
    }
    format!("config: {}", parts.join(" "))
}
