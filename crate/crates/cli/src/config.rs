//! Command-line parsing with an optional JSON defaults file.
//!
//! The file maps subcommand names to objects whose keys are long flag names
//! (`max_frames` and `max-frames` both work). Its values are fed through the
//! same parsers as the command line, and only for flags the command line did
//! not set, so the order is flags > file > built-in defaults.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use serde_json::Value;

use crate::args::Cli;

pub fn parse<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let mut argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let mut cmd = Cli::command();
    let matches = cmd.try_get_matches_from_mut(argv.clone())?;
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return Cli::from_arg_matches(&matches);
    };
    let text = fs::read_to_string(&path).map_err(|e| cmd.error(ErrorKind::Io, format!("config file {}: {e}", path.display())))?;
    let file: Value = serde_json::from_str(&text).map_err(|e| cmd.error(ErrorKind::InvalidValue, format!("config file {}: {e}", path.display())))?;
    let Value::Object(sections) = file else {
        return Err(cmd.error(ErrorKind::InvalidValue, "config file must hold a JSON object"));
    };
    for name in sections.keys() {
        if cmd.find_subcommand(name).is_none() {
            return Err(cmd.error(ErrorKind::InvalidSubcommand, format!("config file: unknown command `{name}`")));
        }
    }
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    if let Some(section) = sections.get(name) {
        argv.extend(section_args(&mut cmd, name, sub, section)?);
    }
    let matches = cmd.try_get_matches_from_mut(argv)?;
    Cli::from_arg_matches(&matches)
}

/// Command-line tokens for the file entries the user did not override.
fn section_args(cmd: &mut clap::Command, name: &str, given: &ArgMatches, section: &Value) -> Result<Vec<OsString>, clap::Error> {
    let Value::Object(entries) = section else {
        return Err(cmd.error(ErrorKind::InvalidValue, format!("config file: `{name}` must be an object")));
    };
    let sub = cmd.find_subcommand(name).expect("checked above").clone();
    let mut out = Vec::new();
    for (key, value) in entries {
        let long = key.replace('_', "-");
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(long.as_str())) else {
            return Err(cmd.error(ErrorKind::UnknownArgument, format!("config file: `{name}` has no option `{key}`")));
        };
        if given.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        let takes_value = arg.get_action().takes_values();
        let scalar = |v: &Value| -> Result<String, clap::Error> {
            match v {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                Value::Bool(b) => Ok(b.to_string()),
                _ => Err(clap::Error::raw(ErrorKind::InvalidValue, format!("config file: `{name}.{key}` must be a string, number or boolean\n"))),
            }
        };
        match value {
            Value::Null => {}
            Value::Bool(b) if !takes_value => {
                if *b {
                    out.push(format!("--{long}").into());
                }
            }
            Value::Array(items) => {
                for item in items {
                    out.push(format!("--{long}={}", scalar(item)?).into());
                }
            }
            v => out.push(format!("--{long}={}", scalar(v)?).into()),
        }
    }
    Ok(out)
}
