//! Per-subcommand options, resolved as flags over config file over defaults.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Declares a clap argument struct with every field optional and the
/// matching resolved config whose keys equal the long flag names.
macro_rules! options {
    (
        $args:ident => $cfg:ident {
            $( $field:ident ($flag:literal): $ty:ty = $default:expr, $help:literal; )*
        }
        optional {
            $( $ofield:ident ($oflag:literal): $oty:ty, $ohelp:literal; )*
        }
    ) => {
        #[derive(clap::Args, Debug, Default, serde::Serialize)]
        pub struct $args {
            /// TOML file with default values for these options.
            #[arg(long)]
            #[serde(skip)]
            pub config: Option<std::path::PathBuf>,
            $(
                #[arg(long = $flag, help = $help)]
                #[serde(rename = $flag, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
            $(
                #[arg(long = $oflag, help = $ohelp)]
                #[serde(rename = $oflag, skip_serializing_if = "Option::is_none")]
                pub $ofield: Option<$oty>,
            )*
        }

        #[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $cfg {
            $(
                #[serde(rename = $flag)]
                pub $field: $ty,
            )*
            $(
                #[serde(rename = $oflag)]
                pub $ofield: Option<$oty>,
            )*
        }

        impl Default for $cfg {
            fn default() -> Self {
                $cfg {
                    $( $field: $default, )*
                    $( $ofield: None, )*
                }
            }
        }
    };
}

pub(crate) use options;

fn read_file(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Usage(format!("invalid config {}: {}", path.display(), e.message())))
}

fn to_object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("options serialize") {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

/// Overlays flags on the file's top-level keys known to this subcommand and
/// its `[section]` table, then fills defaults.
pub fn resolve<A, C>(args: &A, file: Option<&PathBuf>, section: &str) -> Result<C, CliError>
where
    A: Serialize,
    C: DeserializeOwned + Serialize + Default,
{
    let known = to_object(&C::default());
    let mut merged = Map::new();
    if let Some(path) = file {
        let table = read_file(path)?;
        for (k, v) in &table {
            if known.contains_key(k) && !v.is_table() {
                merged.insert(k.clone(), serde_json::to_value(v).expect("toml value"));
            }
        }
        if let Some(toml::Value::Table(sub)) = table.get(section) {
            for (k, v) in sub {
                merged.insert(k.clone(), serde_json::to_value(v).expect("toml value"));
            }
        }
    }
    merged.extend(to_object(args));
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("invalid option: {e}")))
}

pub fn require<T: Copy>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

pub fn parse<T: std::str::FromStr>(value: &str, flag: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid --{flag} `{value}`: {e}")))
}
