//! Named parameter storage, partitioned into disjoint groups. The groups
//! matter because the trainer updates the w-groups and the alpha-groups on
//! different batches and with different rules.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Primary-branch model weights.
    PrimaryW,
    /// Auxiliary-branch model weights, per task.
    AuxW(usize),
    /// Fusion projections and width adapters (cross-task paths only).
    Fusion,
    /// Norm affine pairs (gamma, beta).
    Norm,
    /// Auxiliary-to-primary architecture weights.
    AlphaP,
    /// Primary-to-auxiliary architecture weights.
    AlphaA,
}

impl ParamGroup {
    pub fn is_alpha(self) -> bool {
        matches!(self, ParamGroup::AlphaP | ParamGroup::AlphaA)
    }

    /// Model-weight groups (everything the w-step updates).
    pub fn is_weight(self) -> bool {
        !self.is_alpha()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Append-only parameter store; insertion order is the canonical iteration
/// order everywhere (updates, serialization, gradient maps).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param { name, group, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn ids_where(&self, pred: impl Fn(ParamGroup) -> bool) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| pred(p.group))
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn scalar_count_in(&self, pred: impl Fn(ParamGroup) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p.group))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Clamp every alpha scalar into [0, 1].
    pub fn clamp_alphas(&mut self) {
        for p in &mut self.params {
            if p.group.is_alpha() {
                for v in p.value.data_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    /// FNV-1a hash over the raw bits of the selected group's values.
    /// Used to assert that alternate steps never touch the other group.
    pub fn group_hash(&self, pred: impl Fn(ParamGroup) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            if pred(p.group) {
                for v in p.value.data() {
                    for b in v.to_bits().to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x0000_0100_0000_01b3);
                    }
                }
            }
        }
        h
    }
}
