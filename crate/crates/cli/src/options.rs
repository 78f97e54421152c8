//! Resolution of command settings from defaults, a config file, `--set`
//! overrides and explicit flags, and the snapshot written for every run.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use stereoseg::pipeline::{apply_override, RunConfig, Stage};

/// Table holding a command's own options inside a config file.
pub const INVOCATION: &str = "invocation";

/// File name of the resolved-config snapshot in the output directory.
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

/// A config file split into its run-config part and its invocation table,
/// with `--set` overrides already applied.
pub struct Layered {
    pub run: toml::Table,
    pub invocation: toml::Table,
}

impl Layered {
    /// Reads `config` (if any) and applies `overrides`. Keys starting with
    /// `invocation.` go to the invocation table; other keys go to the run
    /// config, or to the invocation table when `run_config` is false.
    pub fn load(command: &str, config: Option<&Path>, overrides: &[String], run_config: bool) -> Result<Layered> {
        let mut run = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| stereoseg::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut invocation = match run.remove(INVOCATION) {
            Some(toml::Value::Table(t)) => t,
            Some(_) => bail!(stereoseg::Error::Config(format!("`{INVOCATION}` must be a table"))),
            None => toml::Table::new(),
        };
        if let Some(c) = invocation.remove("command") {
            if c.as_str() != Some(command) {
                bail!(stereoseg::Error::Config(format!(
                    "config was written for command {c}, not `{command}`"
                )));
            }
        }
        for o in overrides {
            match o.strip_prefix("invocation.") {
                Some(rest) => apply_override(&mut invocation, rest)?,
                None if run_config => apply_override(&mut run, o)?,
                None => apply_override(&mut invocation, o)?,
            }
        }
        if !run_config && !run.is_empty() {
            let keys: Vec<&String> = run.keys().collect();
            bail!(stereoseg::Error::Config(format!("`{command}` takes no run config; unknown keys {keys:?}")));
        }
        Ok(Layered { run, invocation })
    }

    /// The run config for `stage`, defaulting the stage when absent and
    /// rejecting a different one.
    pub fn run_config(&self, stage: Stage) -> Result<RunConfig> {
        let mut table = self.run.clone();
        match table.get("stage").and_then(|v| v.as_str()) {
            None => {
                table.insert("stage".into(), toml::Value::String(stage.name().into()));
            }
            Some(s) if s == stage.name() => {}
            Some(s) => bail!(stereoseg::Error::Config(format!(
                "this command runs stage `{}`, config says `{s}`",
                stage.name()
            ))),
        }
        let text = toml::to_string(&table).context("re-serializing config")?;
        Ok(RunConfig::parse(&text, &[])?)
    }

    /// The invocation options; missing fields take their defaults.
    pub fn invocation<T: DeserializeOwned>(&self) -> Result<T> {
        toml::Value::Table(self.invocation.clone())
            .try_into()
            .map_err(|e| stereoseg::Error::Config(format!("{INVOCATION}: {e}")).into())
    }
}

/// Writes `out/resolved_config.toml`: the run config (if any) followed by
/// the invocation table. Feeding the file back through `--config`
/// reproduces the run.
pub fn write_snapshot<T: Serialize>(out: &Path, command: &str, run: Option<&RunConfig>, invocation: &T) -> Result<()> {
    let mut doc = match run {
        Some(r) => r.to_toml().parse::<toml::Table>().context("snapshot of the run config")?,
        None => toml::Table::new(),
    };
    let mut inv = toml::Table::try_from(invocation).context("snapshot of the invocation")?;
    inv.insert("command".into(), toml::Value::String(command.into()));
    doc.insert(INVOCATION.into(), toml::Value::Table(inv));
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = toml::to_string(&doc).context("serializing snapshot")?;
    stereoseg::data::io::write_atomic(&out.join(SNAPSHOT_FILE), text.as_bytes())?;
    Ok(())
}
