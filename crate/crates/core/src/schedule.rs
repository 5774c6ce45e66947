//! Three-phase parameter update schedule.
//!
//! Steps are numbered `1..=T` and split at `T1 = ⌈0.2T⌉` and `T2 = ⌈0.7T⌉`:
//!
//! | phase          | steps       | trainable groups                    |
//! |----------------|-------------|-------------------------------------|
//! | WarmUp         | `[1, T1]`   | routers, backbone                   |
//! | Stabilization  | `(T1, T2]`  | routers, experts with `M[d][e] = 1` |
//! | Consolidation  | `(T2, T]`   | experts with `M[d][e] = 1`          |
//!
//! Distillation teachers are never trainable.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::model::{GroupId, GroupKind, MoeModel};
use crate::numerics::Real;
use crate::specialization::AffinityState;

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.2;
pub const DEFAULT_STABILIZATION_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmUp,
    Stabilization,
    Consolidation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::WarmUp => "warmup",
            Phase::Stabilization => "stabilization",
            Phase::Consolidation => "consolidation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub total: usize,
    pub t1: usize,
    pub t2: usize,
    /// Also train the domain's experts during warm-up.
    pub experts_in_warmup: bool,
}

impl PhasePlan {
    /// Default boundaries `⌈0.2T⌉`, `⌈0.7T⌉`.
    pub fn new(total: usize) -> Result<Self> {
        Self::from_fractions(total, DEFAULT_WARMUP_FRACTION, DEFAULT_STABILIZATION_FRACTION)
    }

    pub fn from_fractions(total: usize, f1: f64, f2: f64) -> Result<Self> {
        if !(f1 > 0.0 && f1 < f2 && f2 <= 1.0) {
            return Err(arg_err!("phase fractions must satisfy 0 < f1 < f2 <= 1, got {f1}, {f2}"));
        }
        let t1 = (f1 * total as f64).ceil() as usize;
        let t2 = (f2 * total as f64).ceil() as usize;
        Self::with_boundaries(total, t1, t2)
    }

    pub fn with_boundaries(total: usize, t1: usize, t2: usize) -> Result<Self> {
        if !(0 < t1 && t1 < t2 && t2 <= total) {
            return Err(arg_err!("phase boundaries must satisfy 0 < T1 < T2 <= T, got T1={t1} T2={t2} T={total}"));
        }
        Ok(Self {
            total,
            t1,
            t2,
            experts_in_warmup: false,
        })
    }

    pub fn phase_of(&self, t: usize) -> Result<Phase> {
        if t == 0 || t > self.total {
            return Err(arg_err!("step {t} outside [1, {}]", self.total));
        }
        Ok(if t <= self.t1 {
            Phase::WarmUp
        } else if t <= self.t2 {
            Phase::Stabilization
        } else {
            Phase::Consolidation
        })
    }
}

/// The parameter groups allowed to change at one step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UpdateMask {
    pub groups: BTreeSet<GroupId>,
}

impl UpdateMask {
    pub fn all<S: Real>(model: &MoeModel<S>) -> Self {
        Self {
            groups: model.params.groups().map(|(g, _)| g).collect(),
        }
    }

    pub fn contains(&self, g: GroupId) -> bool {
        self.groups.contains(&g)
    }

    pub fn names<S: Real>(&self, model: &MoeModel<S>) -> Vec<String> {
        self.groups.iter().map(|&g| model.params.group(g).name.clone()).collect()
    }

    /// Number of scalar parameters the mask lets through.
    pub fn parameter_count<S: Real>(&self, model: &MoeModel<S>) -> usize {
        self.groups.iter().map(|&g| model.params.group_size(g)).sum()
    }
}

/// Trainable groups at step `t` for a batch from `domain`.
///
/// `states` holds one affinity state per MoE layer; pass an empty slice to
/// treat every mask row as all ones.
pub fn update_mask<S: Real>(
    plan: &PhasePlan,
    t: usize,
    domain: usize,
    states: &[AffinityState],
    model: &MoeModel<S>,
) -> Result<UpdateMask> {
    update_mask_for(plan, t, &[domain], states, model)
}

/// Like [`update_mask`] for a batch drawing on several domains: an expert is
/// included when any of them claims it.
pub fn update_mask_for<S: Real>(
    plan: &PhasePlan,
    t: usize,
    domains: &[usize],
    states: &[AffinityState],
    model: &MoeModel<S>,
) -> Result<UpdateMask> {
    let phase = plan.phase_of(t)?;
    if !states.is_empty() && states.len() != model.config.num_layers {
        return Err(arg_err!("{} affinity states for {} layers", states.len(), model.config.num_layers));
    }
    if let Some(st) = states.first() {
        if let Some(&d) = domains.iter().find(|&&d| d >= st.domains()) {
            return Err(arg_err!("domain {d} outside [0, {})", st.domains()));
        }
    }
    let (routers, backbone, experts) = match phase {
        Phase::WarmUp => (true, true, plan.experts_in_warmup),
        Phase::Stabilization => (true, false, true),
        Phase::Consolidation => (false, false, true),
    };
    let claimed = |layer: usize, expert: usize| {
        states.is_empty() || domains.iter().any(|&d| states[layer].allows(d, expert))
    };
    let groups = model
        .params
        .groups()
        .filter(|(_, g)| match g.kind {
            GroupKind::Backbone => backbone,
            GroupKind::Router { .. } => routers,
            GroupKind::Teacher { .. } => false,
            GroupKind::Expert { layer, expert } => experts && claimed(layer, expert),
        })
        .map(|(id, _)| id)
        .collect();
    Ok(UpdateMask { groups })
}
