//! Run configuration: a flat `key = value` file with one section per module
//! (`[synth]`, `[data]`, `[model]`, `[train]`, `[probe]`, `[fine_tune]`,
//! `[eval]`). Missing sections and keys keep their defaults; flags override
//! whatever the file says.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use fdn_core::dataset::{SgConfig, SynthConfig};
use fdn_core::evaluation::DEFAULT_DELAYS_MS;
use fdn_core::model::ModelConfig;
use fdn_core::training::TrainConfig;
use ini::Ini;

use crate::UsageError;

const SECTIONS: [&str; 7] = ["synth", "data", "model", "train", "probe", "fine_tune", "eval"];

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let ini = Ini::load_from_file(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut sections = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if props.iter().next().is_some() {
                    bail!(UsageError("config keys must live in a section".into()));
                }
                continue;
            };
            if !SECTIONS.contains(&name) {
                bail!(UsageError(format!("unknown config section [{name}]")));
            }
            let map: BTreeMap<String, String> = props.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
            sections.insert(name.to_string(), map);
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> BTreeMap<String, String> {
        self.sections.get(name).cloned().unwrap_or_default()
    }

    pub fn synth(&self) -> anyhow::Result<(SynthConfig, Vec<usize>)> {
        let s = self.section("synth");
        let mut c = match s.get("preset").map(String::as_str) {
            None | Some("default") => SynthConfig::default(),
            Some("surrogate") => SynthConfig::surrogate(),
            Some(other) => bail!(UsageError(format!("unknown synth preset `{other}`"))),
        };
        let mut dofs = Vec::new();
        for (k, v) in &s {
            match k.as_str() {
                "preset" => {}
                "n" => c.n = num(k, v)?,
                "duration_s" => c.duration_s = num(k, v)?,
                "sample_rate" => c.sample_rate = num(k, v)?,
                "static_s" => c.static_s = num(k, v)?,
                "force_scale" => c.force_scale = num(k, v)?,
                "torque_scale" => c.torque_scale = num(k, v)?,
                "residual_peak" => c.residual_peak = num(k, v)?,
                "sigma_base" => c.sigma_base = num(k, v)?,
                "sigma_gain" => c.sigma_gain = num(k, v)?,
                "u_noise" => c.u_noise = num(k, v)?,
                "w_sensor_noise" => c.w_sensor_noise = num(k, v)?,
                "offset_std" => c.offset_std = num(k, v)?,
                "session" => c.session = v.clone(),
                "dofs" => dofs = list(k, v)?,
                _ => bail!(UsageError(format!("unknown synth key `{k}`"))),
            }
        }
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok((c, dofs))
    }

    pub fn data(&self, seed: u64) -> anyhow::Result<DataConfig> {
        let mut d = DataConfig { split_seed: seed, ..DataConfig::default() };
        for (k, v) in &self.section("data") {
            match k.as_str() {
                "test_fraction" => d.test_fraction = num(k, v)?,
                "split_seed" => d.split_seed = num(k, v)?,
                "stride" => d.stride = num(k, v)?,
                "sg_window" => d.sg.window = num(k, v)?,
                "sg_order" => d.sg.order = num(k, v)?,
                _ => bail!(UsageError(format!("unknown data key `{k}`"))),
            }
        }
        if d.stride == 0 {
            bail!(UsageError("data stride must be positive".into()));
        }
        Ok(d)
    }

    pub fn model(&self) -> anyhow::Result<ModelConfig> {
        ModelConfig::from_pairs(&self.section("model")).map_err(|e| UsageError(e.to_string()).into())
    }

    /// Stage settings from `section`, falling back to `[train]` per key.
    pub fn train(&self, section: &str, seed: u64) -> anyhow::Result<TrainConfig> {
        let mut merged = self.section("train");
        merged.extend(self.section(section));
        let mut c = TrainConfig { seed, ..TrainConfig::default() };
        for (k, v) in &merged {
            match k.as_str() {
                "batch_size" => c.batch_size = num(k, v)?,
                "epochs" => c.epochs = num(k, v)?,
                "lr" => c.lr = num(k, v)?,
                "max_steps" => c.max_steps = Some(num(k, v)?),
                "clip" => c.clip = if v == "none" { None } else { Some(num(k, v)?) },
                _ => bail!(UsageError(format!("unknown [{section}] key `{k}`"))),
            }
        }
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }

    pub fn eval(&self) -> anyhow::Result<EvalConfig> {
        let mut e = EvalConfig::default();
        for (k, v) in &self.section("eval") {
            match k.as_str() {
                "delays" => e.delays = list(k, v)?,
                "batch_size" => e.batch_size = num(k, v)?,
                "plot_seconds" => e.plot_seconds = num(k, v)?,
                _ => bail!(UsageError(format!("unknown eval key `{k}`"))),
            }
        }
        if e.batch_size == 0 {
            bail!(UsageError("eval batch_size must be positive".into()));
        }
        Ok(e)
    }
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub test_fraction: f64,
    pub split_seed: u64,
    pub stride: usize,
    pub sg: SgConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { test_fraction: 1.0 / 3.0, split_seed: 0, stride: 10, sg: SgConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub delays: Vec<f64>,
    pub batch_size: usize,
    pub plot_seconds: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { delays: DEFAULT_DELAYS_MS.to_vec(), batch_size: 32, plot_seconds: 20.0 }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| anyhow!(UsageError(format!("{key} = {value}: {e}"))))
}

/// Comma-separated list.
pub fn list<T: std::str::FromStr>(key: &str, value: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s))
        .collect::<anyhow::Result<_>>()
        .with_context(|| format!("parsing {key}"))?;
    if items.is_empty() {
        bail!(UsageError(format!("{key} is empty")));
    }
    Ok(items)
}
