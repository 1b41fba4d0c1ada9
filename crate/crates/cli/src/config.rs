//! Layered TOML configuration: preset, then config file, then `TUMORSEG_*`
//! environment variables, then `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use tumorseg::data::{PartitionFractions, SynthConfig, DEFAULT_MIN_TUMOR_PIXELS, DEFAULT_WINDOW_HI, DEFAULT_WINDOW_LO};
use tumorseg::losses::LossWeights;
use tumorseg::models::{SegmenterConfig, TrainConfig};
use tumorseg::perturb::PerturbConfig;
use tumorseg::pipeline::{LoopConfig, PipelineConfig};
use tumorseg::{Error, Result};

/// Prefix of environment overrides: `TUMORSEG_PIPELINE__BETA=0.8` sets `pipeline.beta`.
pub const ENV_PREFIX: &str = "TUMORSEG_";

/// Environment variables read by the argument parser rather than the config.
const RESERVED_ENV: &[&str] = &["TUMORSEG_CONFIG"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub generator: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n: 200,
            size: 64,
            seed: 0,
            generator: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSection {
    pub window_lo: f64,
    pub window_hi: f64,
    pub min_tumor_pixels: usize,
    /// Label value marking tumor voxels in the label volumes.
    pub tumor_label: u8,
    /// Keep only planes whose label volume is non-zero somewhere.
    pub organ_planes_only: bool,
    pub seed: u64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            window_lo: DEFAULT_WINDOW_LO,
            window_hi: DEFAULT_WINDOW_HI,
            min_tumor_pixels: DEFAULT_MIN_TUMOR_PIXELS,
            tumor_label: 2,
            organ_planes_only: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub preset: Preset,
    pub synth: SynthSection,
    pub partition: PartitionFractions,
    pub preprocess: PreprocessSection,
    pub pipeline: LoopConfig,
    pub model: SegmenterConfig,
    pub ssl: TrainConfig,
    pub ms: TrainConfig,
    pub an: TrainConfig,
    pub loss: LossWeights,
    pub perturb: PerturbConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::from_preset(Preset::Desk)
    }
}

impl Config {
    pub fn from_preset(preset: Preset) -> Self {
        let p = match preset {
            Preset::Desk => PipelineConfig::desk(),
            Preset::Corpus => PipelineConfig::corpus(),
        };
        Self {
            preset,
            synth: SynthSection::default(),
            partition: PartitionFractions::default(),
            preprocess: PreprocessSection::default(),
            pipeline: p.pipeline,
            model: p.model,
            ssl: p.ssl,
            ms: p.ms,
            an: p.an,
            loss: p.loss,
            perturb: p.perturb,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            pipeline: self.pipeline,
            model: self.model,
            ssl: self.ssl,
            ms: self.ms,
            an: self.an,
            loss: self.loss,
            perturb: self.perturb.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline_config().validate()?;
        let s = &self.synth;
        if s.n == 0 || s.size < 8 {
            return Err(Error::Config(format!(
                "synth needs n >= 1 and size >= 8, got n = {} size = {}",
                s.n, s.size
            )));
        }
        Ok(())
    }

    /// Resolved snapshot; loading it back yields the same config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn load(file: Option<&Path>, env: &[(String, String)], sets: &[String]) -> Result<Self> {
        let mut layer = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (key, value) in env_overrides(env) {
            set_dotted(&mut layer, &key, &value)?;
        }
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
            set_dotted(&mut layer, key.trim(), value.trim())?;
        }
        let preset = match layer.get("preset") {
            Some(v) => v
                .clone()
                .try_into::<Preset>()
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let mut base = to_table(&Self::from_preset(preset))?;
        merge(&mut base, layer.clone());
        let cfg: Config = Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        let resolved = to_table(&cfg)?;
        let mut unknown = Vec::new();
        unknown_keys(&layer, &resolved, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn to_table(cfg: &Config) -> Result<Table> {
    match Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("a struct serializes to a table"),
    }
}

/// `TUMORSEG_A__B=v` becomes `("a.b", "v")`.
pub fn env_overrides(env: &[(String, String)]) -> Vec<(String, String)> {
    let mut out: Vec<_> = env
        .iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !RESERVED_ENV.contains(&k.as_str()))
        .map(|(k, v)| (k[ENV_PREFIX.len()..].to_ascii_lowercase().replace("__", "."), v.clone()))
        .collect();
    out.sort();
    out
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn unknown_keys(given: &Table, resolved: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, resolved.get(k)) {
            (_, None) => out.push(path),
            (Value::Table(g), Some(Value::Table(r))) => unknown_keys(g, r, &path, out),
            _ => {}
        }
    }
}
