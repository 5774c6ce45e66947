//! Toy mixture-of-experts transformer.
//!
//! Each block is an optional causal single-head self-attention sublayer
//! followed by a routed MoE feed-forward sublayer, both post-norm with
//! residuals:
//!
//! ```text
//! h = LN1(x + Attn(x))        (h = LN1(x) without attention)
//! y = LN2(h + MoE(h))
//! ```
//!
//! Parameters live in a [`ParamStore`] partitioned into named groups so the
//! trainer can mask updates per group.

mod checkpoint;
mod layer;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, peek_header, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader,
    LayerLayout, TensorEntry,
};
pub use layer::{DomainAccess, ExpertGradGate, ExpertParams, MoeLayer, Routing, RoutingRecord};
pub use params::{Binding, Group, GroupId, GroupKind, ParamGrads, ParamId, ParamStore};

use crate::error::{arg_err, Error, Result};
use crate::numerics::{Precision, Real, Tape, Tensor, Var};
use crate::router::AdaptiveRouter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    #[serde(default)]
    pub shared_expert: bool,
    pub expert_hidden_dim: usize,
    #[serde(default = "yes")]
    pub attention: bool,
    pub max_seq_len: usize,
    #[serde(default)]
    pub precision: Precision,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            model_dim: 32,
            num_layers: 2,
            experts_per_layer: 8,
            top_k: 2,
            shared_expert: false,
            expert_hidden_dim: 32,
            attention: true,
            max_seq_len: 16,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("experts_per_layer", self.experts_per_layer),
            ("expert_hidden_dim", self.expert_hidden_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.top_k == 0 || self.top_k > self.experts_per_layer {
            return Err(Error::Config(format!(
                "top_k must be in [1, {}], got {}",
                self.experts_per_layer, self.top_k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attention: Option<Attention>,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub moe: MoeLayer,
}

/// Options for one forward pass.
#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Domain label per token. Enables domain-gated expert availability.
    pub token_domains: Option<&'a [usize]>,
    /// Per `(layer, token, expert)` gate on expert gradients.
    pub expert_grad_gate: Option<&'a dyn Fn(usize, usize, usize) -> bool>,
}

/// Result of [`MoeModel::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Routing used at each MoE layer.
    pub routing: Vec<Routing>,
    /// Input to each MoE layer (the router's `h`).
    pub moe_inputs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MoeModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub head: (ParamId, ParamId),
}

impl<S: Real> MoeModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.precision != S::PRECISION {
            return Err(Error::Config(format!(
                "config precision {:?} does not match element type {:?}",
                config.precision,
                S::PRECISION
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let embed = store.add_group("embed", GroupKind::Backbone);
        let tok_embed = store.add(
            embed,
            "embed.tok",
            Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng),
        );
        let pos_embed = store.add(
            embed,
            "embed.pos",
            Tensor::randn(&[config.max_seq_len, d], 1.0, &mut rng),
        );
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let attention = config.attention.then(|| {
                let g = store.add_group(format!("layer.{l}.attn"), GroupKind::Backbone);
                let std = (1.0 / d as f64).sqrt();
                let mut w = |n: &str| {
                    store.add(g, format!("layer.{l}.attn.{n}"), Tensor::randn(&[d, d], std, &mut rng))
                };
                Attention {
                    wq: w("wq"),
                    wk: w("wk"),
                    wv: w("wv"),
                    wo: w("wo"),
                }
            });
            let ng = store.add_group(format!("layer.{l}.norm"), GroupKind::Backbone);
            let ln1 = (
                store.add(ng, format!("layer.{l}.ln1.g"), Tensor::full(&[d], S::one())),
                store.add(ng, format!("layer.{l}.ln1.b"), Tensor::zeros(&[d])),
            );
            let ln2 = (
                store.add(ng, format!("layer.{l}.ln2.g"), Tensor::full(&[d], S::one())),
                store.add(ng, format!("layer.{l}.ln2.b"), Tensor::zeros(&[d])),
            );
            let moe = MoeLayer::init(
                &mut store,
                l,
                d,
                config.experts_per_layer,
                config.top_k,
                config.expert_hidden_dim,
                config.shared_expert,
                &mut rng,
            );
            blocks.push(Block {
                attention,
                ln1,
                ln2,
                moe,
            });
        }
        let hg = store.add_group("head", GroupKind::Backbone);
        let head = (
            store.add(
                hg,
                "head.w",
                Tensor::randn(&[d, config.vocab_size], (1.0 / d as f64).sqrt(), &mut rng),
            ),
            store.add(hg, "head.b", Tensor::zeros(&[config.vocab_size])),
        );
        Ok(Self {
            config,
            params: store,
            tok_embed,
            pos_embed,
            blocks,
            head,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().map(|b| &b.moe)
    }

    pub fn layer(&self, l: usize) -> &MoeLayer {
        &self.blocks[l].moe
    }

    pub fn expert_counts(&self) -> Vec<usize> {
        self.layers().map(MoeLayer::num_experts).collect()
    }

    pub fn has_adaptive_routers(&self) -> bool {
        self.layers().any(|l| l.adaptive.is_some())
    }

    /// Forward pass over `ids`, a batch of sequences each padded to `seq_len`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding<'_, S>,
        ids: &[usize],
        seq_len: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        if seq_len == 0 || seq_len > self.config.max_seq_len || !ids.len().is_multiple_of(seq_len) {
            return Err(arg_err!(
                "{} tokens do not form sequences of length {} (max {})",
                ids.len(),
                seq_len,
                self.config.max_seq_len
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(arg_err!("token id {} outside vocabulary {}", bad, self.config.vocab_size));
        }
        if let Some(doms) = opts.token_domains {
            if doms.len() != ids.len() {
                return Err(arg_err!("{} domain labels for {} tokens", doms.len(), ids.len()));
            }
        }
        let tok = bind.var(tape, self.tok_embed);
        let pos = bind.var(tape, self.pos_embed);
        let te = tape.embedding(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % seq_len).collect();
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        let mut routing = Vec::with_capacity(self.blocks.len());
        let mut moe_inputs = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let h = match &block.attention {
                Some(a) => {
                    let (wq, wk, wv, wo) = (
                        bind.var(tape, a.wq),
                        bind.var(tape, a.wk),
                        bind.var(tape, a.wv),
                        bind.var(tape, a.wo),
                    );
                    let q = tape.matmul(x, wq)?;
                    let k = tape.matmul(x, wk)?;
                    let v = tape.matmul(x, wv)?;
                    let att = tape.causal_attention(q, k, v, seq_len)?;
                    let o = tape.matmul(att, wo)?;
                    tape.add(x, o)?
                }
                None => x,
            };
            let (g1, b1) = (bind.var(tape, block.ln1.0), bind.var(tape, block.ln1.1));
            let u = tape.layer_norm(h, g1, b1)?;
            let r = block.moe.route(tape, bind, u, opts.token_domains)?;
            let gate = opts.expert_grad_gate.map(|f| move |i: usize, j: usize| f(l, i, j));
            let f = block
                .moe
                .moe_forward(tape, bind, u, &r, gate.as_ref().map(|g| g as &dyn Fn(usize, usize) -> bool))?;
            let y = tape.add(u, f)?;
            let (g2, b2) = (bind.var(tape, block.ln2.0), bind.var(tape, block.ln2.1));
            x = tape.layer_norm(y, g2, b2)?;
            routing.push(r);
            moe_inputs.push(u);
        }
        let (hw, hb) = (bind.var(tape, self.head.0), bind.var(tape, self.head.1));
        let z = tape.matmul(x, hw)?;
        let logits = tape.add_row(z, hb)?;
        Ok(Forward {
            logits,
            routing,
            moe_inputs,
        })
    }

    /// Logits for a single sequence plus detached per-layer routing records.
    pub fn forward_tokens(&self, ids: &[usize]) -> Result<(Tensor<S>, Vec<RoutingRecord<S>>)> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.params);
        let fw = self.forward(&mut tape, &mut bind, ids, ids.len(), ForwardOptions::default())?;
        let records = fw
            .routing
            .iter()
            .map(|r| RoutingRecord {
                probs: tape.value(r.probs).clone(),
                selected: r.selected.clone(),
            })
            .collect();
        Ok((tape.value(fw.logits).clone(), records))
    }

    /// Duplicates expert `src` of layer `layer`; returns the new expert's index.
    ///
    /// The copy gets bit-identical weights, a router column copied from the
    /// source's column (in the linear router and, when present, the adaptive
    /// router), and its own parameter group.
    pub fn add_expert_copy(&mut self, layer: usize, src: usize) -> Result<usize> {
        let moe = self
            .blocks
            .get(layer)
            .map(|b| &b.moe)
            .ok_or_else(|| arg_err!("no MoE layer {layer}"))?;
        if src >= moe.num_experts() {
            return Err(arg_err!("layer {} has no expert {}", layer, src));
        }
        let new_id = moe.num_experts();
        let name = format!("layer.{layer}.expert.{new_id}");
        let g = self.params.add_group(
            name.clone(),
            GroupKind::Expert {
                layer,
                expert: new_id,
            },
        );
        let source = moe.experts[src].clone();
        let expert = ExpertParams::copy_of(&mut self.params, &source, g, &name);
        let (rw, rb) = (moe.router_w, moe.router_b);
        let adaptive = moe.adaptive.clone();
        self.params.get_mut(rw).append_column_copy(src)?;
        self.params.get_mut(rb).append_column_copy(src)?;
        if let Some(a) = &adaptive {
            a.copy_column(&mut self.params, src)?;
        }
        let moe = &mut self.blocks[layer].moe;
        moe.experts.push(expert);
        moe.access.push(DomainAccess::All);
        Ok(new_id)
    }

    /// Attaches an adaptive router to every MoE layer and freezes the linear
    /// routers as distillation teachers.
    pub fn attach_adaptive_routers(&mut self, seed: u64, temperature: f64) -> Result<()> {
        for l in 0..self.blocks.len() {
            if self.blocks[l].moe.adaptive.is_some() {
                continue;
            }
            let w = self.blocks[l].moe.router_w;
            let r = AdaptiveRouter::init(&mut self.params, l, w, seed, temperature)?;
            let g = self.blocks[l].moe.router_group;
            self.params.set_kind(g, GroupKind::Teacher { layer: l });
            self.blocks[l].moe.adaptive = Some(r);
        }
        Ok(())
    }

    /// Clears every domain-availability restriction.
    pub fn open_all_experts(&mut self) {
        for b in &mut self.blocks {
            for a in &mut b.moe.access {
                *a = DomainAccess::All;
            }
        }
    }

    pub fn group_ids_of_kind(&self, pred: impl Fn(&GroupKind) -> bool) -> Vec<GroupId> {
        self.params
            .groups()
            .filter(|(_, g)| pred(&g.kind))
            .map(|(id, _)| id)
            .collect()
    }

    /// Group id of expert `e` in layer `l`.
    pub fn expert_group(&self, l: usize, e: usize) -> GroupId {
        self.blocks[l].moe.experts[e].group
    }
}
