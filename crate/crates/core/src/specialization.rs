//! Domain-guided expert specialization.
//!
//! Per MoE layer, an [`AffinityState`] counts how often each domain's tokens
//! select each expert. Every refresh period the fresh fractions are blended
//! into a smoothed affinity `Â`, and the binary specialization mask is derived
//! row by row with a relative threshold:
//!
//! ```text
//! M[d][e] = 1  iff  Â[d][e] ≥ φ · max_e' Â[d][e']
//! ```
//!
//! During training, expert `e` only receives gradient from tokens of domains
//! with `M[d][e] = 1`. Experts claimed by several domains are duplicated so
//! that each domain ends up with a private copy.

use std::collections::BTreeSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::model::{DomainAccess, MoeModel, ParamGrads};
use crate::numerics::Real;

/// Relative threshold φ.
pub const DEFAULT_THRESHOLD: f64 = 0.6;
/// Weight of the fresh observation in the smoothed-affinity update.
pub const DEFAULT_EMA_WEIGHT: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicationRecord {
    pub step: usize,
    pub layer: usize,
    pub source: usize,
    /// `None` when the duplication budget was exhausted and the copy was skipped.
    pub copy: Option<usize>,
    pub domain: usize,
}

/// Expert–domain affinity bookkeeping for one MoE layer.
#[derive(Debug, Clone)]
pub struct AffinityState {
    pub layer: usize,
    pub threshold: f64,
    pub ema_weight: f64,
    counts: Vec<Vec<u64>>,
    tokens: Vec<u64>,
    smoothed: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
    populated: bool,
    pub duplications: Vec<DuplicationRecord>,
    pub warnings: Vec<String>,
}

impl AffinityState {
    pub fn new(layer: usize, domains: usize, experts: usize, threshold: f64, ema_weight: f64) -> Self {
        Self {
            layer,
            threshold,
            ema_weight,
            counts: vec![vec![0; experts]; domains],
            tokens: vec![0; domains],
            smoothed: vec![vec![0.0; experts]; domains],
            mask: vec![vec![true; experts]; domains],
            populated: false,
            duplications: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn domains(&self) -> usize {
        self.tokens.len()
    }

    pub fn experts(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    /// True once at least one refresh has populated `Â`.
    pub fn is_populated(&self) -> bool {
        self.populated
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn token_counts(&self) -> &[u64] {
        &self.tokens
    }

    pub fn smoothed(&self) -> &[Vec<f64>] {
        &self.smoothed
    }

    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }

    pub fn allows(&self, domain: usize, expert: usize) -> bool {
        self.mask[domain][expert]
    }

    /// Adds one observation per token: its domain and the experts it selected.
    pub fn accumulate(&mut self, selected: &[Vec<usize>], labels: &[usize]) -> Result<()> {
        if selected.len() != labels.len() {
            return Err(arg_err!("{} routing rows for {} labels", selected.len(), labels.len()));
        }
        let (nd, ne) = (self.domains(), self.experts());
        for (sel, &d) in selected.iter().zip(labels) {
            if d >= nd {
                return Err(arg_err!("domain label {d} outside [0, {nd})"));
            }
            if let Some(&e) = sel.iter().find(|&&e| e >= ne) {
                return Err(arg_err!("expert {e} outside [0, {ne})"));
            }
        }
        for (sel, &d) in selected.iter().zip(labels) {
            self.tokens[d] += 1;
            for &e in sel {
                self.counts[d][e] += 1;
            }
        }
        Ok(())
    }

    /// Fractions `A[d][e]` from the counters; rows with no tokens are zero.
    pub fn raw_affinity(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .zip(&self.tokens)
            .map(|(row, &n)| {
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    /// Blends the fresh affinity into `Â`, re-derives `M`, and resets the counters.
    ///
    /// The first refresh adopts the fresh affinity directly. Domains that saw
    /// no tokens since the last refresh keep their previous `Â` row.
    pub fn ema_refresh(&mut self) {
        let fresh = self.raw_affinity();
        for (d, row) in fresh.iter().enumerate() {
            if self.tokens[d] == 0 {
                continue;
            }
            for (s, &f) in self.smoothed[d].iter_mut().zip(row) {
                *s = if self.populated {
                    self.ema_weight * f + (1.0 - self.ema_weight) * *s
                } else {
                    f
                };
            }
        }
        self.populated = true;
        self.refresh_mask();
        for row in &mut self.counts {
            row.iter_mut().for_each(|c| *c = 0);
        }
        self.tokens.iter_mut().for_each(|n| *n = 0);
    }

    /// Overwrites `Â` (and re-derives the mask).
    pub fn set_smoothed(&mut self, smoothed: Vec<Vec<f64>>) -> Result<()> {
        if smoothed.len() != self.domains() || smoothed.iter().any(|r| r.len() != self.experts()) {
            return Err(arg_err!("affinity matrix shape mismatch"));
        }
        self.smoothed = smoothed;
        self.populated = true;
        self.refresh_mask();
        Ok(())
    }

    fn refresh_mask(&mut self) {
        let (mask, starved) = derive_mask(&self.smoothed, self.threshold);
        for d in starved {
            let msg = format!("layer {}: domain {d} has no affinity; all experts open", self.layer);
            warn!("{msg}");
            self.warnings.push(msg);
        }
        self.mask = mask;
    }

    /// Jaccard overlap of two domains' mask rows.
    pub fn overlap(&self, d1: usize, d2: usize) -> f64 {
        overlap_metric(&self.mask[d1], &self.mask[d2])
    }

    /// Mean pairwise overlap across all domain pairs.
    pub fn mean_overlap(&self) -> f64 {
        let n = self.domains();
        let mut total = 0.0;
        let mut pairs = 0;
        for a in 0..n {
            for b in a + 1..n {
                total += self.overlap(a, b);
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }

    fn push_expert_column(&mut self) {
        for row in &mut self.counts {
            row.push(0);
        }
        for row in &mut self.smoothed {
            row.push(0.0);
        }
        for row in &mut self.mask {
            row.push(false);
        }
    }

    /// Duplicates every expert that two or more domains' mask rows claim.
    ///
    /// The domain with the lower `Â[d][e]` moves to the copy (ties move the
    /// higher-indexed domain); the source keeps the rest. The moved domain's
    /// affinity entry and mask bit move with it, the source becomes
    /// unavailable to that domain, and the copy becomes available only to it.
    /// At most `cap` copies are made per layer over the state's lifetime;
    /// further conflicts are logged as skipped.
    pub fn resolve_shared_experts<S: Real>(
        &mut self,
        model: &mut MoeModel<S>,
        step: usize,
        cap: usize,
    ) -> Result<Vec<DuplicationRecord>> {
        if model.layer(self.layer).num_experts() != self.experts() {
            return Err(arg_err!(
                "affinity tracks {} experts, layer {} has {}",
                self.experts(),
                self.layer,
                model.layer(self.layer).num_experts()
            ));
        }
        let mut actions = Vec::new();
        let original = self.experts();
        for e in 0..original {
            loop {
                let claimants: Vec<usize> = (0..self.domains()).filter(|&d| self.mask[d][e]).collect();
                if claimants.len() < 2 {
                    break;
                }
                // lowest affinity moves; among equals the highest index moves
                let mover = *claimants
                    .iter()
                    .min_by(|&&a, &&b| {
                        self.smoothed[a][e]
                            .partial_cmp(&self.smoothed[b][e])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty");
                let made = self.duplications.iter().filter(|r| r.copy.is_some()).count();
                if made >= cap {
                    let already = self
                        .duplications
                        .iter()
                        .any(|r| r.copy.is_none() && r.source == e && r.domain == mover);
                    if !already {
                        let msg = format!(
                            "layer {}: duplication budget {cap} exhausted; expert {e} stays shared",
                            self.layer
                        );
                        warn!("{msg}");
                        self.warnings.push(msg);
                        let rec = DuplicationRecord {
                            step,
                            layer: self.layer,
                            source: e,
                            copy: None,
                            domain: mover,
                        };
                        self.duplications.push(rec.clone());
                        actions.push(rec);
                    }
                    break;
                }
                let copy = model.add_expert_copy(self.layer, e)?;
                self.push_expert_column();
                self.smoothed[mover][copy] = self.smoothed[mover][e];
                self.smoothed[mover][e] = 0.0;
                self.mask[mover][copy] = true;
                self.mask[mover][e] = false;
                let access = &mut model.blocks[self.layer].moe.access;
                access[e].revoke(mover);
                access[copy] = DomainAccess::Only(BTreeSet::from([mover]));
                let rec = DuplicationRecord {
                    step,
                    layer: self.layer,
                    source: e,
                    copy: Some(copy),
                    domain: mover,
                };
                self.duplications.push(rec.clone());
                actions.push(rec);
            }
        }
        Ok(actions)
    }

    /// Rows of the `(step, layer, domain, expert, A, Â, M)` snapshot table.
    pub fn snapshot(&self, step: usize) -> Vec<SnapshotRow> {
        let raw = self.raw_affinity();
        let mut rows = Vec::with_capacity(self.domains() * self.experts());
        for d in 0..self.domains() {
            for e in 0..self.experts() {
                rows.push(SnapshotRow {
                    step,
                    layer: self.layer,
                    domain: d,
                    expert: e,
                    raw: raw[d][e],
                    smoothed: self.smoothed[d][e],
                    mask: self.mask[d][e],
                });
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotRow {
    pub step: usize,
    pub layer: usize,
    pub domain: usize,
    pub expert: usize,
    pub raw: f64,
    pub smoothed: f64,
    pub mask: bool,
}

pub const SNAPSHOT_CSV_HEADER: &str = "step,layer,domain,expert,A,A_smoothed,M";

impl SnapshotRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.layer,
            self.domain,
            self.expert,
            self.raw,
            self.smoothed,
            u8::from(self.mask)
        )
    }
}

/// Thresholds each row at `threshold × row max` (inclusive).
///
/// Rows whose maximum is zero become all ones; their indices are returned.
pub fn derive_mask(smoothed: &[Vec<f64>], threshold: f64) -> (Vec<Vec<bool>>, Vec<usize>) {
    let mut starved = Vec::new();
    let mask = smoothed
        .iter()
        .enumerate()
        .map(|(d, row)| {
            let max = row.iter().copied().fold(0.0_f64, f64::max);
            if max <= 0.0 {
                starved.push(d);
                return vec![true; row.len()];
            }
            let cut = threshold * max;
            row.iter().map(|&v| v >= cut).collect()
        })
        .collect();
    (mask, starved)
}

/// `|a ∧ b| / |a ∨ b|`; zero when both rows are empty.
pub fn overlap_metric(a: &[bool], b: &[bool]) -> f64 {
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let either = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// How a batch is labelled for gradient filtering.
#[derive(Debug, Clone, Copy)]
pub enum BatchDomains<'a> {
    /// The whole batch comes from one domain.
    Grouped(usize),
    /// One label per token.
    Mixed(&'a [usize]),
}

/// Zeroes expert gradients the specialization masks do not allow.
///
/// In grouped mode expert `e` of layer `l` keeps its gradient only when
/// `M_l[d][e] = 1` for the batch domain `d`. In mixed mode the per-token part
/// of the rule is applied during the forward pass (see
/// [`ForwardOptions::expert_grad_gate`](crate::model::ForwardOptions)); here
/// an expert is cleared only when no domain in the batch allows it.
pub fn expert_gradient_filter<S: Real>(
    states: &[AffinityState],
    model: &MoeModel<S>,
    domains: BatchDomains<'_>,
    grads: &mut ParamGrads<S>,
) {
    for st in states {
        let layer = model.layer(st.layer);
        for (e, expert) in layer.experts.iter().enumerate() {
            let keep = match domains {
                BatchDomains::Grouped(d) => st.allows(d, e),
                BatchDomains::Mixed(labels) => labels.iter().any(|&d| st.allows(d, e)),
            };
            if !keep {
                for &p in &model.params.group(expert.group).params {
                    grads.clear(p);
                }
            }
        }
    }
}
