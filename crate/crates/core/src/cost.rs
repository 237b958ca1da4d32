//! Platform, link and accuracy models, and their file formats.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::PartitionScheme;
use crate::graph::{DnnGraph, LayerOrder};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed {kind} model: {msg}")]
    Malformed { kind: &'static str, msg: String },
    #[error("platform {platform}: unsupported bit width {bits} (expected 4, 8, 16 or 32)")]
    BadBits { platform: String, bits: u32 },
    #[error("{owner}: {field} must be finite and non-negative, got {value}")]
    BadValue {
        owner: String,
        field: String,
        value: f64,
    },
    #[error("link {0}: bandwidth must be finite and strictly positive")]
    BadBandwidth(String),
    #[error("uncosted layer {layer} on {platform}")]
    UncostedLayer { layer: String, platform: String },
    #[error("accuracy value for {key} must lie in [0, 1], got {value}")]
    BadAccuracy { key: String, value: f64 },
    #[error("accuracy table has no entry for cut after {0:?} and no fallback")]
    UncoveredCut(String),
}

fn check_non_negative<T: Scalar>(owner: &str, field: &str, value: T) -> Result<(), ModelError> {
    if value.is_finite() && value >= T::zero() {
        Ok(())
    } else {
        Err(ModelError::BadValue {
            owner: owner.to_string(),
            field: field.to_string(),
            value: value.to_f64_lossy(),
        })
    }
}

/// Latency and energy of one layer execution or one transfer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound = "T: Scalar")]
pub struct CostEntry<T> {
    pub latency_s: T,
    pub energy_j: T,
}

impl<T: Scalar> CostEntry<T> {
    pub fn new(latency_s: T, energy_j: T) -> Self {
        Self {
            latency_s,
            energy_j,
        }
    }

    fn validate(&self, owner: &str, key: &str) -> Result<(), ModelError> {
        check_non_negative(owner, &format!("{key}.latency_s"), self.latency_s)?;
        check_non_negative(owner, &format!("{key}.energy_j"), self.energy_j)
    }
}

/// One accelerator: precision, on-chip memory and per-layer costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound = "T: Scalar")]
pub struct PlatformModel<T> {
    pub name: String,
    pub bits: u32,
    pub mem_capacity_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_cost: Option<CostEntry<T>>,
    #[serde(default)]
    pub cost_table: BTreeMap<String, CostEntry<T>>,
}

impl<T: Scalar> PlatformModel<T> {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: Self = serde_json::from_str(text).map_err(|e| ModelError::Malformed {
            kind: "platform",
            msg: e.to_string(),
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if ![4, 8, 16, 32].contains(&self.bits) {
            return Err(ModelError::BadBits {
                platform: self.name.clone(),
                bits: self.bits,
            });
        }
        if self.mem_capacity_bytes == 0 {
            log::warn!(
                "platform {}: zero memory capacity, only empty segments fit",
                self.name
            );
        }
        if let Some(d) = &self.default_cost {
            d.validate(&self.name, "default_cost")?;
        }
        for (id, entry) in &self.cost_table {
            entry.validate(&self.name, id)?;
        }
        Ok(())
    }

    /// Cost of running `layer_id` on this platform, falling back to the
    /// declared default.
    pub fn layer_cost(&self, layer_id: &str) -> Result<CostEntry<T>, ModelError> {
        self.cost_table
            .get(layer_id)
            .or(self.default_cost.as_ref())
            .copied()
            .ok_or_else(|| ModelError::UncostedLayer {
                layer: layer_id.to_string(),
                platform: self.name.clone(),
            })
    }
}

/// Inter-platform transport with an affine cost in the payload size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound = "T: Scalar")]
pub struct LinkModel<T> {
    pub name: String,
    pub bandwidth_bps: T,
    pub fixed_latency_s: T,
    pub energy_per_bit_j: T,
    pub fixed_energy_j: T,
}

impl<T: Scalar> LinkModel<T> {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: Self = serde_json::from_str(text).map_err(|e| ModelError::Malformed {
            kind: "link",
            msg: e.to_string(),
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.bandwidth_bps.is_finite() && self.bandwidth_bps > T::zero()) {
            return Err(ModelError::BadBandwidth(self.name.clone()));
        }
        check_non_negative(&self.name, "fixed_latency_s", self.fixed_latency_s)?;
        check_non_negative(&self.name, "energy_per_bit_j", self.energy_per_bit_j)?;
        check_non_negative(&self.name, "fixed_energy_j", self.fixed_energy_j)
    }

    /// Latency and energy for sending `bits` over the link.
    pub fn link_transfer(&self, bits: u64) -> CostEntry<T> {
        let payload = T::from_u64_lossy(bits);
        CostEntry {
            latency_s: self.fixed_latency_s + payload / self.bandwidth_bps,
            energy_j: self.fixed_energy_j + payload * self.energy_per_bit_j,
        }
    }
}

/// Key used in a cut table when the platforms before the boundary hold no
/// layers.
pub const EMPTY_PREFIX_KEY: &str = "";

/// Top-1 accuracy per partitioning, measured offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[serde(bound = "T: Scalar")]
pub enum AccuracyModel<T> {
    Constant {
        top1: T,
    },
    CutTable {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fallback: Option<T>,
        entries: BTreeMap<String, T>,
    },
}

impl<T: Scalar> AccuracyModel<T> {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: Self = serde_json::from_str(text).map_err(|e| ModelError::Malformed {
            kind: "accuracy",
            msg: e.to_string(),
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |key: &str, v: T| {
            if v >= T::zero() && v <= T::one() {
                Ok(())
            } else {
                Err(ModelError::BadAccuracy {
                    key: key.to_string(),
                    value: v.to_f64_lossy(),
                })
            }
        };
        match self {
            AccuracyModel::Constant { top1 } => check("top1", *top1),
            AccuracyModel::CutTable { fallback, entries } => {
                if let Some(f) = fallback {
                    check("fallback", *f)?;
                }
                entries.iter().try_for_each(|(k, v)| check(k, *v))
            }
        }
    }

    fn lookup(&self, key: &str) -> Result<T, ModelError> {
        match self {
            AccuracyModel::Constant { top1 } => Ok(*top1),
            AccuracyModel::CutTable { fallback, entries } => entries
                .get(key)
                .or(fallback.as_ref())
                .copied()
                .ok_or_else(|| ModelError::UncoveredCut(key.to_string())),
        }
    }

    /// Top-1 accuracy of `scheme` over a chain whose platforms have the
    /// given bit widths.
    ///
    /// Two platforms: the entry keyed by the last layer on the first
    /// platform ([`EMPTY_PREFIX_KEY`] if it holds none). Longer chains key on
    /// the first boundary where the precision drops from the chain maximum.
    /// Without such a drop the precision is uniform and the fallback (or
    /// the whole-network entry) applies.
    pub fn accuracy_eval(
        &self,
        graph: &DnnGraph,
        order: &LayerOrder,
        scheme: &PartitionScheme,
        platform_bits: &[u32],
    ) -> Result<T, ModelError> {
        let (fallback, _) = match self {
            AccuracyModel::Constant { top1 } => return Ok(*top1),
            AccuracyModel::CutTable { fallback, entries } => (fallback, entries),
        };
        let key_at = |cut: usize| -> &str {
            if cut == 0 {
                EMPTY_PREFIX_KEY
            } else {
                graph.layer(order.order[cut - 1]).id.as_str()
            }
        };
        let boundary = match platform_bits.len() {
            0 | 1 => None,
            2 => Some(0),
            _ => precision_drop(platform_bits),
        };
        match boundary {
            Some(b) => self.lookup(key_at(scheme.cuts[b])),
            None => match fallback {
                Some(f) => Ok(*f),
                None => self.lookup(key_at(order.len())),
            },
        }
    }
}

/// Index of the first link whose sender runs at the chain's maximum
/// precision and whose receiver runs below it.
fn precision_drop(bits: &[u32]) -> Option<usize> {
    let max = *bits.iter().max()?;
    bits.windows(2).position(|w| w[0] == max && w[1] < max)
}
