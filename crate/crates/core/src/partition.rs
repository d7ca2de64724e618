//! Named parameter registry with per-head shared/personalized roles.
//!
//! Only self-attention heads are ever personalized. Within every layer the
//! first `P_l` head indices are private to the client; all remaining heads
//! and every non-attention parameter are aggregated by the server.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    Shared,
    Personalized,
}

impl ParamRole {
    pub fn as_byte(self) -> u8 {
        match self {
            ParamRole::Shared => 0,
            ParamRole::Personalized => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ParamRole::Shared),
            1 => Some(ParamRole::Personalized),
            _ => None,
        }
    }
}

/// `round_half_up(ratio * heads)`, clamped to `[0, heads]`.
pub fn personalized_head_count(ratio: f64, heads: usize) -> usize {
    // The epsilon keeps exact halves like 0.7 * 5 from rounding down.
    let raw = (ratio * heads as f64 + 0.5 + 1e-9).floor();
    (raw.max(0.0) as usize).min(heads)
}

/// Personalization ratio and the per-layer count of private heads it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    ratio: f64,
    personalized: Vec<usize>,
    heads: Vec<usize>,
}

impl PartitionSpec {
    pub fn new(ratio: f64, heads_per_layer: &[usize]) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!(
                "personalization ratio must lie in [0, 1], got {ratio}"
            )));
        }
        Ok(Self {
            ratio,
            personalized: heads_per_layer
                .iter()
                .map(|&k| personalized_head_count(ratio, k))
                .collect(),
            heads: heads_per_layer.to_vec(),
        })
    }

    pub fn uniform(ratio: f64, num_heads: usize, num_layers: usize) -> Result<Self> {
        Self::new(ratio, &vec![num_heads; num_layers])
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn num_layers(&self) -> usize {
        self.heads.len()
    }

    /// `P_l` for `layer` (0-based).
    pub fn personalized_heads(&self, layer: usize) -> usize {
        self.personalized[layer]
    }

    pub fn total_heads(&self, layer: usize) -> usize {
        self.heads[layer]
    }

    /// True when no layer has a private head.
    pub fn is_vanilla(&self) -> bool {
        self.personalized.iter().all(|&p| p == 0)
    }

    pub fn role_of_head(&self, layer: usize, head: usize) -> ParamRole {
        if head < self.personalized[layer] {
            ParamRole::Personalized
        } else {
            ParamRole::Shared
        }
    }
}

/// Structural meaning of a canonical parameter name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    HeadQkv { layer: usize, head: usize },
    HeadProj { layer: usize, head: usize },
    Block { layer: usize },
    Global,
}

/// Parses the canonical naming scheme; `None` for anything unrecognized.
pub fn classify_name(name: &str) -> Option<ParamKind> {
    const GLOBAL: [&str; 7] = [
        "embed.W",
        "embed.pos",
        "embed.cls",
        "norm.gain",
        "norm.bias",
        "head.W",
        "head.b",
    ];
    if GLOBAL.contains(&name) {
        return Some(ParamKind::Global);
    }
    let rest = name.strip_prefix("block")?;
    let (layer, rest) = rest.split_once('.')?;
    let layer: usize = parse_index(layer)?;
    if let Some(head_rest) = rest.strip_prefix("head") {
        let (head, leaf) = head_rest.split_once('.')?;
        let head = parse_index(head)?;
        return match leaf {
            "qkv" => Some(ParamKind::HeadQkv { layer, head }),
            "proj" => Some(ParamKind::HeadProj { layer, head }),
            _ => None,
        };
    }
    match rest {
        "ln0.gain" | "ln0.bias" | "ln1.gain" | "ln1.bias" | "mlp.w1" | "mlp.b1" | "mlp.w2" | "mlp.b2" => {
            Some(ParamKind::Block { layer })
        }
        _ => None,
    }
}

fn parse_index(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor<f32>,
    pub role: ParamRole,
}

/// Ordered `name -> (tensor, role)` map; iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>, role: ParamRole) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Schema(format!("{name} (duplicate)")));
        }
        self.params.insert(name, Param { tensor, role });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Scalar element count, optionally restricted to one role.
    pub fn numel(&self, role: Option<ParamRole>) -> usize {
        self.params
            .values()
            .filter(|p| role.is_none_or(|r| p.role == r))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Re-labels every parameter from `spec`; errors before touching anything
    /// if a name does not follow the canonical scheme.
    pub fn assign_roles(&mut self, spec: &PartitionSpec) -> Result<()> {
        let mut roles = Vec::with_capacity(self.params.len());
        for name in self.params.keys() {
            let kind = classify_name(name).ok_or_else(|| Error::Schema(name.clone()))?;
            let role = match kind {
                ParamKind::HeadQkv { layer, head } | ParamKind::HeadProj { layer, head } => {
                    if layer >= spec.num_layers() || head >= spec.total_heads(layer) {
                        return Err(Error::Schema(name.clone()));
                    }
                    spec.role_of_head(layer, head)
                }
                ParamKind::Block { layer } => {
                    if layer >= spec.num_layers() {
                        return Err(Error::Schema(name.clone()));
                    }
                    ParamRole::Shared
                }
                ParamKind::Global => ParamRole::Shared,
            };
            roles.push(role);
        }
        for (p, role) in self.params.values_mut().zip(roles) {
            p.role = role;
        }
        Ok(())
    }

    /// Deep copies of every `role` parameter in lexicographic order.
    pub fn extract(&self, role: ParamRole) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .filter(|(_, p)| p.role == role)
            .map(|(n, p)| (n.clone(), p.tensor.clone()))
            .collect()
    }

    /// Overwrites `role` parameters in place. Validates every update first so
    /// a rejected merge leaves the store untouched.
    pub fn merge(&mut self, updates: &[(String, Tensor<f32>)], role: ParamRole) -> Result<()> {
        for (name, t) in updates {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::Merge(format!("unknown parameter `{name}`")))?;
            if p.role != role {
                return Err(Error::Merge(format!(
                    "`{name}` has role {:?}, update is for {role:?}",
                    p.role
                )));
            }
            if p.tensor.shape() != t.shape() {
                return Err(Error::Merge(format!(
                    "`{name}` has shape {:?}, update has {:?}",
                    p.tensor.shape(),
                    t.shape()
                )));
            }
        }
        for (name, t) in updates {
            let p = self.params.get_mut(name).expect("validated");
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
