//! Checkpoints: a little-endian `f64` parameter blob plus a `key = value`
//! manifest holding the model configuration, normalization statistics, seed,
//! stage, parameter layout and the SHA-256 of the blob.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::dataset::NormStats;
use crate::error::{FdnError, Result};
use crate::model::ModelConfig;
use crate::tape::{ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.ini";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "fdn-checkpoint-1";

/// Training stage that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Scratch,
    Pretrain,
    LinearProbe,
    FineTune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Scratch => "scratch",
            Stage::Pretrain => "pretrain",
            Stage::LinearProbe => "linear_probe",
            Stage::FineTune => "fine_tune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = FdnError;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::Scratch, Stage::Pretrain, Stage::LinearProbe, Stage::FineTune]
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| FdnError::Config(format!("unknown stage `{s}`")))
    }
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `fdn` or a baseline name.
    pub kind: String,
    pub stage: Stage,
    pub seed: u64,
    /// Optimizer steps taken to produce the parameters.
    pub steps: usize,
    pub cfg: ModelConfig,
    pub norm: NormStats,
    /// Parameters in store order.
    pub params: Vec<(String, Tensor)>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| FdnError::Checkpoint(format!("{key}: {e}"))))
        .collect()
}

impl Checkpoint {
    pub fn new(kind: &str, stage: Stage, seed: u64, steps: usize, cfg: &ModelConfig, norm: &NormStats, store: &ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            stage,
            seed,
            steps,
            cfg: cfg.clone(),
            norm: norm.clone(),
            params: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.params.iter().map(|(_, t)| t.len()).sum::<usize>());
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Hex SHA-256 of the parameter blob.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.blob()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let blob = self.blob();
        fs::write(dir.join(BLOB_FILE), &blob)?;
        let mut ini = Ini::new();
        ini.with_section(Some("checkpoint"))
            .set("format", FORMAT)
            .set("kind", self.kind.as_str())
            .set("stage", self.stage.name())
            .set("seed", self.seed.to_string())
            .set("steps", self.steps.to_string())
            .set("revin_variance", "population")
            .set("blob_sha256", hex::encode(Sha256::digest(&blob)));
        for (k, v) in self.cfg.to_pairs() {
            ini.with_section(Some("model")).set(k, v);
        }
        let n = &self.norm;
        ini.with_section(Some("norm"))
            .set("layout_n", n.layout_n.to_string())
            .set("x_mean", join(&n.x_mean))
            .set("x_std", join(&n.x_std))
            .set("q_mean", join(&n.q_mean))
            .set("q_std", join(&n.q_std))
            .set("w_mean", join(&n.w_mean))
            .set("w_std", join(&n.w_std));
        for (i, (name, t)) in self.params.iter().enumerate() {
            let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            ini.with_section(Some("params")).set(format!("{i:05}"), format!("{name} {shape}"));
        }
        ini.write_to_file(dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    /// Reads a checkpoint and verifies the blob against the manifest hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let ini = Ini::load_from_file(dir.join(MANIFEST_FILE)).map_err(|e| FdnError::Checkpoint(format!("manifest: {e}")))?;
        let section = |name: &str| {
            ini.section(Some(name)).ok_or_else(|| FdnError::Checkpoint(format!("manifest lacks [{name}]")))
        };
        let head = section("checkpoint")?;
        let get = |k: &str| head.get(k).ok_or_else(|| FdnError::Checkpoint(format!("manifest lacks `{k}`")));
        if get("format")? != FORMAT {
            return Err(FdnError::Checkpoint(format!("unsupported format `{}`", get("format")?)));
        }
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let digest = hex::encode(Sha256::digest(&blob));
        if digest != get("blob_sha256")? {
            return Err(FdnError::Checkpoint("parameter blob does not match its hash".into()));
        }
        let parse_u = |k: &str| get(k)?.parse::<u64>().map_err(|e| FdnError::Checkpoint(format!("{k}: {e}")));

        let pairs: BTreeMap<String, String> =
            section("model")?.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let cfg = ModelConfig::from_pairs(&pairs)?;

        let ns = section("norm")?;
        let nv = |k: &str| split(k, ns.get(k).ok_or_else(|| FdnError::Checkpoint(format!("norm lacks `{k}`")))?);
        let norm = NormStats {
            layout_n: ns.get("layout_n").and_then(|v| v.parse().ok()).unwrap_or(cfg.n),
            x_mean: nv("x_mean")?,
            x_std: nv("x_std")?,
            q_mean: nv("q_mean")?,
            q_std: nv("q_std")?,
            w_mean: nv("w_mean")?,
            w_std: nv("w_std")?,
        };

        let mut params = Vec::new();
        let mut offset = 0usize;
        for (_, entry) in section("params")?.iter() {
            let (name, shape) = entry
                .rsplit_once(' ')
                .ok_or_else(|| FdnError::Checkpoint(format!("bad parameter entry `{entry}`")))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(|s| s.parse().map_err(|e| FdnError::Checkpoint(format!("{name} shape: {e}"))))
                .collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let end = offset + 8 * len;
            if end > blob.len() {
                return Err(FdnError::Checkpoint("parameter blob shorter than its manifest".into()));
            }
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            params.push((name.to_string(), Tensor::from_vec(&shape, data)));
            offset = end;
        }
        if offset != blob.len() {
            return Err(FdnError::Checkpoint("parameter blob longer than its manifest".into()));
        }
        Ok(Self {
            kind: get("kind")?.to_string(),
            stage: get("stage")?.parse()?,
            seed: parse_u("seed")?,
            steps: parse_u("steps")? as usize,
            cfg,
            norm,
            params,
        })
    }

    /// Copies every stored parameter into `store`; names and shapes must match
    /// exactly. Trainable flags of `store` are kept.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(FdnError::Checkpoint(format!(
                "checkpoint has {} parameter tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        self.copy_matching(store, |_| true).map(|_| ())
    }

    /// Copies the parameters whose names satisfy `select`; returns how many
    /// tensors were copied.
    pub fn copy_matching(&self, store: &mut ParamStore, select: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.params.iter().filter(|(n, _)| select(n)) {
            let id = store.id(name).ok_or_else(|| FdnError::Checkpoint(format!("model has no parameter `{name}`")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(FdnError::Checkpoint(format!("{name}: shape {:?} vs {:?}", t.shape(), dst.shape())));
            }
            *dst = t.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// Hex SHA-256 over the values of the parameters whose names satisfy `select`.
pub fn params_hash(store: &ParamStore, select: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter().filter(|(_, p)| select(&p.name)) {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ablations, FdnModel};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n: 2,
            history: 16,
            horizon: 16,
            d_model: 8,
            patch: 4,
            experts: 2,
            layers: 1,
            heads: 2,
            ablations: Ablations::parse_list("no_fpf").unwrap(),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let m = FdnModel::new(tiny(), 3).unwrap();
        let mut norm = NormStats::identity(2);
        norm.w_std[2] = 0.1 + 0.2;
        let ck = Checkpoint::new("fdn", Stage::Scratch, 3, 10, &m.cfg, &norm, &m.store);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.hash(), ck.hash());

        let mut fresh = FdnModel::new(tiny(), 4).unwrap();
        back.restore_into(&mut fresh.store).unwrap();
        assert_eq!(params_hash(&fresh.store, |_| true), params_hash(&m.store, |_| true));
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let m = FdnModel::new(tiny(), 3).unwrap();
        let ck = Checkpoint::new("fdn", Stage::Pretrain, 3, 0, &m.cfg, &NormStats::identity(2), &m.store);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let mut blob = fs::read(&path).unwrap();
        blob[0] ^= 1;
        fs::write(&path, blob).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(FdnError::Checkpoint(_))));
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let m = FdnModel::new(tiny(), 3).unwrap();
        let ck = Checkpoint::new("fdn", Stage::Scratch, 3, 0, &m.cfg, &NormStats::identity(2), &m.store);
        let mut other = FdnModel::new(ModelConfig { d_model: 4, ..tiny() }, 0).unwrap();
        assert!(ck.restore_into(&mut other.store).is_err());
    }
}
