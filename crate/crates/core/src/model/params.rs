use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Index of one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Index of one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId(pub usize);

/// Role of a parameter group in update masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupKind {
    /// Embeddings, attention, norms, shared experts, output head.
    Backbone,
    /// The router that currently produces routing logits.
    Router { layer: usize },
    /// A frozen router kept only as a distillation teacher.
    Teacher { layer: usize },
    /// One routed expert.
    Expert { layer: usize, expert: usize },
}

#[derive(Debug, Clone)]
pub struct Group {
    pub name: String,
    pub kind: GroupKind,
    pub params: Vec<ParamId>,
}

/// All model parameters, partitioned into disjoint named groups.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    group_of: Vec<GroupId>,
    groups: Vec<Group>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            group_of: Vec::new(),
            groups: Vec::new(),
            by_name: HashMap::new(),
        }
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group(&mut self, name: impl Into<String>, kind: GroupKind) -> GroupId {
        self.groups.push(Group {
            name: name.into(),
            kind,
            params: Vec::new(),
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn add(&mut self, group: GroupId, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.values.len());
        assert!(
            self.by_name.insert(name.clone(), id).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.group_of.push(group);
        self.groups[group.0].params.push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn group_of(&self, id: ParamId) -> GroupId {
        self.group_of[id.0]
    }

    pub fn group(&self, g: GroupId) -> &Group {
        &self.groups[g.0]
    }

    pub fn groups(&self) -> impl Iterator<Item = (GroupId, &Group)> {
        self.groups.iter().enumerate().map(|(i, g)| (GroupId(i), g))
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group_by_name(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn set_kind(&mut self, g: GroupId, kind: GroupKind) {
        self.groups[g.0].kind = kind;
    }

    /// Total scalar count of a group.
    pub fn group_size(&self, g: GroupId) -> usize {
        self.groups[g.0]
            .params
            .iter()
            .map(|p| self.values[p.0].len())
            .sum()
    }

    pub fn total_size(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Checks that every parameter sits in exactly one group.
    pub fn check_partition(&self) -> Result<()> {
        let mut seen = vec![0usize; self.values.len()];
        for g in &self.groups {
            for p in &g.params {
                seen[p.0] += 1;
            }
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(arg_err!(
                "parameter {} appears in {} groups",
                self.names[i],
                seen[i]
            ));
        }
        for (i, g) in self.group_of.iter().enumerate() {
            if !self.groups[g.0].params.contains(&ParamId(i)) {
                return Err(arg_err!("group index of {} is stale", self.names[i]));
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients, `None` where no gradient reached the parameter.
#[derive(Debug, Clone)]
pub struct ParamGrads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> ParamGrads<S> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, g: Option<Tensor<S>>) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = g;
    }

    pub fn clear(&mut self, id: ParamId) {
        if let Some(slot) = self.grads.get_mut(id.0) {
            *slot = None;
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Squared L2 norm of a group's gradient (zero when absent).
    pub fn group_norm_sq(&self, store: &ParamStore<S>, g: GroupId) -> f64 {
        store
            .group(g)
            .params
            .iter()
            .filter_map(|&p| self.get(p))
            .map(|t| t.sum_sq().as_f64())
            .sum()
    }

    /// True when every gradient entry of the group is exactly zero or absent.
    pub fn group_is_zero(&self, store: &ParamStore<S>, g: GroupId) -> bool {
        store
            .group(g)
            .params
            .iter()
            .filter_map(|&p| self.get(p))
            .all(Tensor::all_zero)
    }

    pub fn add_scaled(&mut self, other: &ParamGrads<S>, scale: S) {
        if other.grads.len() > self.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            let Some(t) = theirs else { continue };
            match mine {
                Some(m) => {
                    for (a, &b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a = *a + b * scale;
                    }
                }
                None => {
                    let mut c = t.clone();
                    for a in c.data_mut() {
                        *a = *a * scale;
                    }
                    *mine = Some(c);
                }
            }
        }
    }
}

/// Lazily registers parameters on a tape during one forward pass.
#[derive(Debug)]
pub struct Binding<'a, S> {
    store: &'a ParamStore<S>,
    live: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
}

impl<'a, S: Real> Binding<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self {
            store,
            live: HashMap::new(),
            frozen: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    /// Trainable view of a parameter.
    pub fn var(&mut self, tape: &mut Tape<S>, id: ParamId) -> Var {
        *self
            .live
            .entry(id)
            .or_insert_with(|| tape.leaf(self.store.get(id).clone()))
    }

    /// Detached view of a parameter: same values, no gradient.
    pub fn frozen(&mut self, tape: &mut Tape<S>, id: ParamId) -> Var {
        *self
            .frozen
            .entry(id)
            .or_insert_with(|| tape.constant(self.store.get(id).clone()))
    }

    /// Collects gradients for every trainable view registered so far.
    pub fn collect(&self, grads: &crate::numerics::Gradients<S>) -> ParamGrads<S> {
        let mut out = ParamGrads::empty(self.store.len());
        for (&id, &v) in &self.live {
            out.set(id, grads.get(v));
        }
        out
    }
}
