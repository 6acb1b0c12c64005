use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupId(pub(crate) usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: GroupId,
}

/// Named set of parameters sharing a learning rate and a frozen flag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParameterGroup {
    pub name: String,
    pub learning_rate: f64,
    pub frozen: bool,
    pub members: Vec<ParamId>,
}

/// Owns every parameter tensor of a model. Each parameter belongs to exactly one group.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    groups: Vec<ParameterGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the group with this name, creating it if needed.
    pub fn group(&mut self, name: &str, learning_rate: f64, frozen: bool) -> GroupId {
        if let Some(i) = self.groups.iter().position(|g| g.name == name) {
            return GroupId(i);
        }
        self.groups.push(ParameterGroup {
            name: name.to_string(),
            learning_rate,
            frozen,
            members: Vec::new(),
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn find_group(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: GroupId) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.params.len());
        self.params.push(Param { name, value, group });
        self.groups[group.0].members.push(id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn groups(&self) -> &[ParameterGroup] {
        &self.groups
    }

    pub fn group_of(&self, id: ParamId) -> &ParameterGroup {
        &self.groups[self.params[id.0].group.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.group_of(id).frozen
    }

    pub fn set_frozen(&mut self, group: GroupId, frozen: bool) {
        self.groups[group.0].frozen = frozen;
    }

    pub fn set_learning_rate(&mut self, group: GroupId, lr: f64) {
        self.groups[group.0].learning_rate = lr;
    }

    pub fn group_info(&self, group: GroupId) -> &ParameterGroup {
        &self.groups[group.0]
    }

    /// Number of scalar values in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Overwrites every parameter whose name passes `select` with the value of
    /// the same-named parameter in `src`. Returns how many were copied.
    pub fn copy_values_from(&mut self, src: &ParamStore, select: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| select(&p.name)) {
            let id = src
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("source has no parameter {}", p.name)))?;
            let v = src.get(id);
            if v.shape() != p.value.shape() {
                return Err(Error::shape(
                    "copy_values_from",
                    format!("{}: {:?} vs {:?}", p.name, v.shape(), p.value.shape()),
                ));
            }
            p.value = v.clone();
            n += 1;
        }
        Ok(n)
    }

    /// SHA-256 over names, shapes and raw value bits of one group's parameters.
    pub fn group_digest(&self, group: GroupId) -> String {
        let mut h = Sha256::new();
        for &id in &self.groups[group.0].members {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-parameter gradients, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn accumulate_one(&mut self, id: ParamId, g: &Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self` parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_one(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    /// Resets every gradient to absent.
    pub fn zero(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Tensor::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn check_finite(&self, store: &ParamStore) -> Result<()> {
        for (id, g) in self.iter() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite gradient for {}",
                    store.param(id).name
                )));
            }
        }
        Ok(())
    }
}
