use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logical slice of the fused attention input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    /// Position of this projection's rows inside the fused `[3d, d]` weight.
    pub fn slice_index(self) -> usize {
        match self {
            Projection::Query => 0,
            Projection::Key => 1,
            Projection::Value => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Projection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "query" | "q" => Ok(Projection::Query),
            "key" | "k" => Ok(Projection::Key),
            "value" | "v" => Ok(Projection::Value),
            other => Err(other.to_string()),
        }
    }
}

fn default_rank() -> usize {
    16
}
fn default_alpha() -> f64 {
    8.0
}
fn default_targets() -> Vec<String> {
    Projection::ALL.iter().map(|p| p.as_str().to_string()).collect()
}
fn default_init_scale() -> f64 {
    0.01
}

/// Low-rank adapter hyperparameters.
///
/// Each adapted projection gains `scale * x · down · up` with
/// `scale = alpha / rank`, `down: [embed_dim, rank]`, `up: [rank, embed_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Projection names; `query`, `key` and `value` are the only ones an
    /// attention block exposes for adaptation.
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
    /// Standard deviation of the Gaussian used for `down`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            alpha: default_alpha(),
            targets: default_targets(),
            init_scale: default_init_scale(),
            dropout: 0.0,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Checks the numeric invariants; projection names are resolved against
    /// a concrete backbone by [`LoraConfig::projections`].
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("lora.rank", "must be >= 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("lora.alpha", "must be a positive real"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("lora.targets", "must name at least one projection"));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::config("lora.init_scale", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("lora.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn projections(&self, backbone: &str) -> Result<BTreeSet<Projection>> {
        self.validate()?;
        self.targets
            .iter()
            .map(|t| {
                t.parse::<Projection>()
                    .map_err(|projection| Error::MissingProjection {
                        backbone: backbone.to_string(),
                        projection,
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = LoraConfig::default();
        assert_eq!(c.rank, 16);
        assert_eq!(c.alpha, 8.0);
        assert_eq!(c.scaling(), 0.5);
        assert_eq!(c.projections("x").unwrap().len(), 3);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = LoraConfig::default();
        c.rank = 0;
        assert!(c.validate().is_err());
        let mut c = LoraConfig::default();
        c.alpha = 0.0;
        assert!(c.validate().is_err());
        let mut c = LoraConfig::default();
        c.targets.clear();
        assert!(c.validate().is_err());
        let mut c = LoraConfig::default();
        c.targets = vec!["out_proj".into()];
        assert!(matches!(
            c.projections("clip-vit-base-32"),
            Err(Error::MissingProjection { .. })
        ));
    }
}
