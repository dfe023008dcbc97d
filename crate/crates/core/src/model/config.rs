use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{FdnError, Result};
use crate::spectral::FilterSpec;

/// Components that can be switched off for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    /// No frequency enhancement at all.
    NoFef,
    /// Frequency enhancement with uniform expert weights instead of a gate.
    NoFefWeights,
    /// A single enhancement filter.
    NoFefMoe,
    /// Raw head outputs without band filtering.
    NoFpf,
    /// One encoder and embedding shared by all modalities.
    SharedEncoder,
    /// Residual head only; it forecasts the full wrench.
    NoTrendHead,
    /// Trend head only; it forecasts the full wrench.
    NoResHead,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::NoFef,
        Ablation::NoFefWeights,
        Ablation::NoFefMoe,
        Ablation::NoFpf,
        Ablation::SharedEncoder,
        Ablation::NoTrendHead,
        Ablation::NoResHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoFef => "no_fef",
            Ablation::NoFefWeights => "no_fef_weights",
            Ablation::NoFefMoe => "no_fef_moe",
            Ablation::NoFpf => "no_fpf",
            Ablation::SharedEncoder => "shared_encoder",
            Ablation::NoTrendHead => "no_trend_head",
            Ablation::NoResHead => "no_res_head",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = FdnError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| FdnError::Config(format!("unknown ablation flag `{s}`")))
    }
}

/// Set of active ablations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ablations(Vec<Ablation>);

impl Ablations {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, a: Ablation) -> Self {
        if !self.0.contains(&a) {
            self.0.push(a);
            self.0.sort();
        }
        self
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.0.contains(&a)
    }

    pub fn iter(&self) -> impl Iterator<Item = Ablation> + '_ {
        self.0.iter().copied()
    }

    /// Comma-separated names, or `none`.
    pub fn to_list(&self) -> String {
        if self.0.is_empty() {
            return "none".into();
        }
        self.0.iter().map(|a| a.name()).collect::<Vec<_>>().join(",")
    }

    pub fn parse_list(s: &str) -> Result<Self> {
        let mut out = Self::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            out = out.with(part.parse()?);
        }
        Ok(out)
    }
}

/// Architecture and filter hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Joint layout width.
    pub n: usize,
    /// History length `L`.
    pub history: usize,
    /// Forecast horizon `T`.
    pub horizon: usize,
    /// Latent width `D`.
    pub d_model: usize,
    /// Patch length `P`; the patch stride equals it.
    pub patch: usize,
    /// Number of enhancement experts `M`.
    pub experts: usize,
    pub layers: usize,
    pub heads: usize,
    pub spec: FilterSpec,
    /// Zero the actuation input and its representation.
    pub mask_u: bool,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 6,
            history: 100,
            horizon: 100,
            d_model: 128,
            patch: 24,
            experts: 32,
            layers: 3,
            heads: 8,
            spec: FilterSpec::default(),
            mask_u: false,
            ablations: Ablations::none(),
        }
    }
}

/// Floor used for the log-variance when no residual head exists.
pub const LOGVAR_FLOOR: f64 = -80.0;
pub const LOGVAR_MIN: f64 = -12.0;
pub const LOGVAR_MAX: f64 = 8.0;
/// Cutoff applied to a surviving head after the other one is ablated.
pub fn collapsed_cutoff(spec: &FilterSpec) -> f64 {
    spec.f_c_dn
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        self.patch
    }

    /// `N = floor((L - P) / S) + 2`.
    pub fn num_patches(&self) -> usize {
        (self.history - self.patch) / self.stride() + 2
    }

    /// Number of one-sided frequency bins of a history window.
    pub fn bins(&self) -> usize {
        self.history / 2 + 1
    }

    /// Time-varying input rows `4n`.
    pub fn varying_rows(&self) -> usize {
        4 * self.n
    }

    pub fn effective_experts(&self) -> usize {
        if self.ablations.has(Ablation::NoFefMoe) {
            1
        } else {
            self.experts
        }
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.has(a)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let err = |m: String| Err(FdnError::Config(m));
        if self.n == 0 {
            return err("n must be positive".into());
        }
        if self.patch == 0 || self.patch > self.history {
            return err(format!("patch length {} must be in 1..={}", self.patch, self.history));
        }
        if self.horizon < 4 || self.history < 4 {
            return err("history and horizon need at least 4 steps".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("width {} must be a positive multiple of {} heads", self.d_model, self.heads));
        }
        if self.experts == 0 {
            return err("at least one expert is required".into());
        }
        if self.has(Ablation::NoTrendHead) && self.has(Ablation::NoResHead) {
            return err("cannot remove both forecasting heads".into());
        }
        Ok(())
    }

    /// Flat `key = value` pairs; the inverse of [`ModelConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v: Vec<(&str, String)> = vec![
            ("n", self.n.to_string()),
            ("history", self.history.to_string()),
            ("horizon", self.horizon.to_string()),
            ("d_model", self.d_model.to_string()),
            ("patch", self.patch.to_string()),
            ("experts", self.experts.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("f_c", self.spec.f_c.to_string()),
            ("f_c_dn", self.spec.f_c_dn.to_string()),
            ("order", self.spec.order.to_string()),
            ("sample_rate", self.spec.sample_rate.to_string()),
            ("mask_u", self.mask_u.to_string()),
            ("ablations", self.ablations.to_list()),
        ];
        v.sort_by(|a, b| a.0.cmp(b.0));
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Builds a config from pairs; missing keys keep their defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs {
            let bad = |e: &dyn fmt::Display| FdnError::Config(format!("{k} = {v}: {e}"));
            let us = || v.parse::<usize>().map_err(|e| bad(&e));
            let fl = || v.parse::<f64>().map_err(|e| bad(&e));
            match k.as_str() {
                "n" => c.n = us()?,
                "history" => c.history = us()?,
                "horizon" => c.horizon = us()?,
                "d_model" => c.d_model = us()?,
                "patch" => c.patch = us()?,
                "experts" => c.experts = us()?,
                "layers" => c.layers = us()?,
                "heads" => c.heads = us()?,
                "f_c" => c.spec.f_c = fl()?,
                "f_c_dn" => c.spec.f_c_dn = fl()?,
                "order" => c.spec.order = v.parse().map_err(|e| bad(&e))?,
                "sample_rate" => c.spec.sample_rate = fl()?,
                "mask_u" => c.mask_u = v.parse().map_err(|e| bad(&e))?,
                "ablations" => c.ablations = Ablations::parse_list(v)?,
                _ => return Err(FdnError::Config(format!("unknown model key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_patch_count() {
        let c = ModelConfig::default();
        assert_eq!(c.num_patches(), 5);
        assert_eq!(c.num_patches() * c.d_model, 640);
    }

    #[test]
    fn pairs_roundtrip() {
        let c = ModelConfig {
            mask_u: true,
            ablations: Ablations::parse_list("no_fpf,shared_encoder").unwrap(),
            ..ModelConfig::default()
        };
        let map: BTreeMap<_, _> = c.to_pairs().into_iter().collect();
        assert_eq!(ModelConfig::from_pairs(&map).unwrap(), c);
    }

    #[test]
    fn rejects_both_heads_removed() {
        let c = ModelConfig {
            ablations: Ablations::parse_list("no_trend_head,no_res_head").unwrap(),
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(Ablations::parse_list("no_such").is_err());
    }
}
