//! Layering of a TOML config file over command-line flags.
//!
//! A config file holds one table per verb (`[train]`, `[datagen]`, ...) whose
//! keys are the long flag names with `-` replaced by `_`. Keys present in the
//! file win over the flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn load(path: &Path) -> anyhow::Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(text.parse::<toml::Table>()?)
}

/// `args` with every key of `file[verb]` replaced by the file's value.
pub fn overlay<A: Serialize + DeserializeOwned>(args: &A, file: Option<&toml::Table>, verb: &str) -> anyhow::Result<A> {
    let Some(section) = file.and_then(|f| f.get(verb)) else {
        return Ok(toml::Value::try_from(args)?.try_into()?);
    };
    let section = section.as_table().ok_or_else(|| anyhow::anyhow!("config entry [{verb}] is not a table"))?;
    let mut merged = toml::Value::try_from(args)?;
    let table = merged.as_table_mut().expect("argument structs serialize to tables");
    for (k, v) in section {
        table.insert(k.clone(), v.clone());
    }
    merged.try_into().map_err(|e| anyhow::anyhow!("config [{verb}]: {e}"))
}

#[cfg(test)]
mod tests {
    use serde::Deserialize;

    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Args {
        steps: usize,
        lr: f64,
        out: Option<String>,
    }

    #[test]
    fn file_values_win() {
        let a = Args { steps: 5, lr: 0.1, out: None };
        let file: toml::Table = "[train]\nsteps = 9\nout = \"x\"\n[other]\nsteps = 1\n".parse().unwrap();
        assert_eq!(overlay(&a, Some(&file), "train").unwrap(), Args { steps: 9, lr: 0.1, out: Some("x".into()) });
        assert_eq!(overlay(&a, Some(&file), "missing").unwrap(), a);
        assert_eq!(overlay(&a, None, "train").unwrap(), a);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let a = Args { steps: 5, lr: 0.1, out: None };
        let file: toml::Table = "[train]\nstep = 9\n".parse().unwrap();
        assert!(overlay(&a, Some(&file), "train").is_err());
        let file: toml::Table = "train = 3\n".parse().unwrap();
        assert!(overlay(&a, Some(&file), "train").is_err());
    }
}
