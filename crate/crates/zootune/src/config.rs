//! Sectioned `key = value` run configuration.
//!
//! Every key is the long name of a command-line flag. A command reads its
//! own section (`[tune]`, `[eval]`, ...) and, for training commands, the
//! shared `[train]` section. Values listed on the command line win.

use std::path::Path;

use ini::Ini;

use crate::error::{Error, Result};

pub const TRAINING_COMMANDS: [&str; 3] = ["pretrain", "tune", "baseline"];

/// Flags equivalent to the config entries that apply to `command`.
/// `true`/`false` values become a bare flag or nothing.
pub fn config_args(text: &str, command: &str) -> Result<Vec<String>> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
    let mut sections = Vec::new();
    if TRAINING_COMMANDS.contains(&command) {
        sections.push("train");
    }
    sections.push(command);
    let mut args = Vec::new();
    for name in sections {
        let Some(props) = ini.section(Some(name)) else { continue };
        for (k, v) in props.iter() {
            if k == "config" {
                return Err(Error::Usage("config files cannot include other config files".into()));
            }
            match v {
                "true" => args.push(format!("--{k}")),
                "false" => {}
                _ => args.push(format!("--{k}={v}")),
            }
        }
    }
    Ok(args)
}

pub fn load_config_args(path: &Path, command: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    config_args(&text, command)
}
