use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Binding, GroupId, GroupKind, ParamId, ParamStore};
use crate::error::{arg_err, Result};
use crate::numerics::{top_k_indices, Real, Tape, Tensor, Var};
use crate::router::AdaptiveRouter;

/// Two-layer GELU feed-forward network, `W2·GELU(W1·u + b1) + b2`.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub group: GroupId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertParams {
    pub(crate) fn init<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        group: GroupId,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add(
            group,
            format!("{prefix}.w1"),
            Tensor::randn(&[d, hidden], (1.0 / d as f64).sqrt(), rng),
        );
        let b1 = store.add(group, format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
        let w2 = store.add(
            group,
            format!("{prefix}.w2"),
            Tensor::randn(&[hidden, d], (1.0 / hidden as f64).sqrt(), rng),
        );
        let b2 = store.add(group, format!("{prefix}.b2"), Tensor::zeros(&[d]));
        Self { group, w1, b1, w2, b2 }
    }

    /// Registers a bit-identical copy of `src` under `prefix` in `group`.
    pub(crate) fn copy_of<S: Real>(
        store: &mut ParamStore<S>,
        src: &ExpertParams,
        group: GroupId,
        prefix: &str,
    ) -> Self {
        let mut cp = |id: ParamId, suffix: &str| {
            let t = store.get(id).clone();
            store.add(group, format!("{prefix}.{suffix}"), t)
        };
        let w1 = cp(src.w1, "w1");
        let b1 = cp(src.b1, "b1");
        let w2 = cp(src.w2, "w2");
        let b2 = cp(src.b2, "b2");
        Self { group, w1, b1, w2, b2 }
    }

    /// Applies the expert to rows of `x`. With `frozen`, parameters enter as constants.
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding<'_, S>,
        x: Var,
        frozen: bool,
    ) -> Result<Var> {
        let mut p = |id| {
            if frozen {
                bind.frozen(tape, id)
            } else {
                bind.var(tape, id)
            }
        };
        let (w1, b1, w2, b2) = (p(self.w1), p(self.b1), p(self.w2), p(self.b2));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let y = tape.matmul(h, w2)?;
        tape.add_row(y, b2)
    }
}

/// Which domains may route to an expert while domain-gated availability is on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "access", content = "domains", rename_all = "snake_case")]
pub enum DomainAccess {
    All,
    Only(BTreeSet<usize>),
    Except(BTreeSet<usize>),
}

impl DomainAccess {
    pub fn allows(&self, domain: usize) -> bool {
        match self {
            DomainAccess::All => true,
            DomainAccess::Only(s) => s.contains(&domain),
            DomainAccess::Except(s) => !s.contains(&domain),
        }
    }

    /// Removes `domain` from the allowed set.
    pub fn revoke(&mut self, domain: usize) {
        match self {
            DomainAccess::All => *self = DomainAccess::Except(BTreeSet::from([domain])),
            DomainAccess::Only(s) => {
                s.remove(&domain);
            }
            DomainAccess::Except(s) => {
                s.insert(domain);
            }
        }
    }
}

/// Routing decision of one MoE layer for a block of tokens.
#[derive(Debug, Clone)]
pub struct Routing {
    /// Softmax routing probabilities, `T × |E|`, on the tape.
    pub probs: Var,
    /// Selected experts per token, highest probability first.
    pub selected: Vec<Vec<usize>>,
}

/// Detached copy of a [`Routing`] for statistics.
#[derive(Debug, Clone)]
pub struct RoutingRecord<S> {
    pub probs: Tensor<S>,
    pub selected: Vec<Vec<usize>>,
}

/// Per-token gate on expert gradients: `(token, expert) -> trainable`.
pub type ExpertGradGate<'a> = &'a dyn Fn(usize, usize) -> bool;

/// One mixture-of-experts feed-forward layer.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub index: usize,
    pub top_k: usize,
    pub router_group: GroupId,
    pub router_w: ParamId,
    pub router_b: ParamId,
    pub experts: Vec<ExpertParams>,
    pub shared: Option<ExpertParams>,
    pub adaptive: Option<AdaptiveRouter>,
    pub access: Vec<DomainAccess>,
}

impl MoeLayer {
    pub(crate) fn init<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        index: usize,
        d: usize,
        num_experts: usize,
        top_k: usize,
        hidden: usize,
        shared: bool,
        rng: &mut R,
    ) -> Self {
        let router_group = store.add_group(format!("layer.{index}.router"), GroupKind::Router { layer: index });
        let router_w = store.add(
            router_group,
            format!("layer.{index}.router.w"),
            Tensor::randn(&[d, num_experts], (1.0 / d as f64).sqrt(), rng),
        );
        let router_b = store.add(
            router_group,
            format!("layer.{index}.router.b"),
            Tensor::zeros(&[num_experts]),
        );
        let experts = (0..num_experts)
            .map(|j| {
                let name = format!("layer.{index}.expert.{j}");
                let g = store.add_group(name.clone(), GroupKind::Expert { layer: index, expert: j });
                ExpertParams::init(store, g, &name, d, hidden, rng)
            })
            .collect();
        let shared = shared.then(|| {
            let name = format!("layer.{index}.shared");
            let g = store.add_group(name.clone(), GroupKind::Backbone);
            ExpertParams::init(store, g, &name, d, hidden, rng)
        });
        Self {
            index,
            top_k,
            router_group,
            router_w,
            router_b,
            experts,
            shared,
            adaptive: None,
            access: vec![DomainAccess::All; num_experts],
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Linear router logits `u·W_r + b_r` on the tape.
    pub fn linear_logits<S: Real>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding<'_, S>,
        u: Var,
    ) -> Result<Var> {
        let w = bind.var(tape, self.router_w);
        let b = bind.var(tape, self.router_b);
        let z = tape.matmul(u, w)?;
        tape.add_row(z, b)
    }

    /// Logits of the linear router without recording, for use as a frozen teacher.
    pub fn teacher_logits<S: Real>(&self, store: &ParamStore<S>, u: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, d) = u.dims2()?;
        let w = store.get(self.router_w);
        let b = store.get(self.router_b);
        let n = w.dims2()?.1;
        let mut z = crate::numerics::matmul_raw(u.data(), w.data(), m, d, n);
        for row in z.chunks_mut(n) {
            for (v, &c) in row.iter_mut().zip(b.data()) {
                *v = *v + c;
            }
        }
        Tensor::new(&[m, n], z)
    }

    /// Routing logits from whichever router is active.
    pub fn logits<S: Real>(&self, tape: &mut Tape<S>, bind: &mut Binding<'_, S>, u: Var) -> Result<Var> {
        match &self.adaptive {
            Some(r) => r.adapt_route(tape, bind, u),
            None => self.linear_logits(tape, bind, u),
        }
    }

    /// Softmax routing probabilities and top-k selections for `u`.
    ///
    /// With `token_domains`, experts whose [`DomainAccess`] excludes a token's
    /// domain are unavailable to that token.
    pub fn route<S: Real>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding<'_, S>,
        u: Var,
        token_domains: Option<&[usize]>,
    ) -> Result<Routing> {
        let logits = self.logits(tape, bind, u)?;
        self.route_from_logits(tape, logits, token_domains)
    }

    pub fn route_from_logits<S: Real>(
        &self,
        tape: &mut Tape<S>,
        logits: Var,
        token_domains: Option<&[usize]>,
    ) -> Result<Routing> {
        let (t, e) = tape.value(logits).dims2()?;
        if e != self.num_experts() {
            return Err(arg_err!("router emits {} logits for {} experts", e, self.num_experts()));
        }
        let avail: Option<Vec<bool>> = match token_domains {
            Some(doms) if self.access.iter().any(|a| *a != DomainAccess::All) => {
                if doms.len() != t {
                    return Err(arg_err!("{} domain labels for {} tokens", doms.len(), t));
                }
                Some(
                    doms.iter()
                        .flat_map(|&d| self.access.iter().map(move |a| a.allows(d)))
                        .collect(),
                )
            }
            _ => None,
        };
        let probs = tape.softmax_masked(logits, avail.as_deref())?;
        let pv = tape.value(probs);
        let selected = (0..t)
            .map(|i| {
                top_k_indices(
                    pv.row(i),
                    self.top_k,
                    avail.as_deref().map(|a| &a[i * e..(i + 1) * e]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Routing { probs, selected })
    }

    /// Weighted sum of the selected experts' outputs (plus the shared expert).
    ///
    /// Each token's output is `Σ_{j∈selected} r_j·FFN_j(u)`, accumulated in
    /// selection order, with the raw softmax probabilities as weights. Experts a
    /// token did not select see none of its gradient. When `grad_gate` rejects a
    /// `(token, expert)` pair the expert still contributes to the forward value,
    /// but through a detached copy of its parameters.
    pub fn moe_forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding<'_, S>,
        u: Var,
        routing: &Routing,
        grad_gate: Option<ExpertGradGate<'_>>,
    ) -> Result<Var> {
        let (t, d) = tape.value(u).dims2()?;
        let e = self.num_experts();
        if routing.selected.len() != t {
            return Err(arg_err!("{} routing rows for {} tokens", routing.selected.len(), t));
        }
        // rows[j][0] trainable rows, rows[j][1] detached rows
        let mut rows: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; e];
        let mut slots: Vec<Vec<(usize, usize, usize)>> = Vec::with_capacity(t);
        for (i, sel) in routing.selected.iter().enumerate() {
            let mut s = Vec::with_capacity(sel.len());
            for &j in sel {
                if j >= e {
                    return Err(arg_err!("selected expert {} of {}", j, e));
                }
                let variant = usize::from(!grad_gate.is_none_or(|f| f(i, j)));
                s.push((j, variant, rows[j][variant].len()));
                rows[j][variant].push(i);
            }
            slots.push(s);
        }
        let mut parts = Vec::new();
        let mut part_of = vec![[usize::MAX; 2]; e];
        for (j, pair) in rows.iter().enumerate() {
            for (variant, toks) in pair.iter().enumerate() {
                if toks.is_empty() {
                    continue;
                }
                let x = tape.index_rows(u, toks)?;
                let y = self.experts[j].forward(tape, bind, x, variant == 1)?;
                let flat: Vec<usize> = toks.iter().map(|&i| i * e + j).collect();
                let gate = tape.gather(routing.probs, &flat, &[toks.len(), 1])?;
                let y = tape.mul_col(y, gate)?;
                part_of[j][variant] = parts.len();
                parts.push(y);
            }
        }
        let plan: Vec<Vec<(usize, usize)>> = slots
            .iter()
            .map(|s| s.iter().map(|&(j, v, pos)| (part_of[j][v], pos)).collect())
            .collect();
        let base = match &self.shared {
            Some(sh) => Some(sh.forward(tape, bind, u, false)?),
            None => None,
        };
        tape.combine_rows(base, &parts, &plan, d)
    }
}
