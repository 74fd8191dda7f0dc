//! TOML run configuration. Unknown keys are rejected.

use codenet::net::{CodeHyper, Model, MsHyper, Toggles};
use codenet::synth::Level;
use codenet::train::TrainConfig;
use serde::Deserialize;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    pub toggles: Option<ToggleOverride>,
    pub input: Option<Vec<PathBuf>>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub emit_rain_layer: Option<bool>,
    pub train: Option<TrainSection>,
    pub synth: Option<SynthSection>,
    pub bench: Option<BenchSection>,
}

/// Toggle overrides for a loaded model. They may only switch blocks off.
#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ToggleOverride {
    pub grl: Option<bool>,
    pub lrl: Option<bool>,
    pub pa: Option<bool>,
    pub rw: Option<bool>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Code,
    Mcode,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Directory written by `synth`.
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub arch: Arch,
    /// Architecture toggles of the trained model; reweighting is set by the
    /// stage.
    #[serde(default)]
    pub toggles: Option<Toggles>,
    pub code: Option<CodeHyper>,
    pub mcode: Option<MsHyper>,
    #[serde(default)]
    pub schedule: TrainConfig,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    pub size: usize,
    /// Levels assigned to pairs in rotation.
    pub levels: Vec<Level>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            count: 30,
            size: 64,
            levels: Level::RAINY.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub t_values: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            t_values: vec![1, 2, 4, 8],
            repeats: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

impl ToggleOverride {
    /// Applies the override; turning on a block the model was built without
    /// is refused.
    pub fn apply(&self, model: &mut Model) -> Result<(), CliError> {
        let t = model.toggles_mut();
        for (name, cur, want) in [
            ("grl", &mut t.grl, self.grl),
            ("lrl", &mut t.lrl, self.lrl),
            ("pa", &mut t.pa, self.pa),
            ("rw", &mut t.rw, self.rw),
        ] {
            match want {
                Some(true) if !*cur => {
                    return Err(CliError::Config(format!(
                        "toggle {name} is off in the model and cannot be turned on"
                    )))
                }
                Some(v) => *cur = v,
                None => {}
            }
        }
        Ok(())
    }
}

/// Resolves the iteration count: overrides may only lower it.
pub fn resolve_iterations(model: &Model, t: Option<usize>) -> Result<usize, CliError> {
    let trained = model.iterations();
    match t {
        None => Ok(trained),
        Some(0) => Err(CliError::Config("T must be at least 1".into())),
        Some(t) if t > trained => Err(CliError::Config(format!(
            "T = {t} exceeds the trained T = {trained}"
        ))),
        Some(t) => Ok(t),
    }
}
