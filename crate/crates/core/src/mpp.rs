//! Modality-shared prompt projector.
//!
//! One trainable embedding `E (K×d_r)` is projected into every prompt:
//! `P_i^m = E · W_i^m` with `W_i^m = W_shared^m + ΔW_i^m`. The projector is
//! linear and has no bias. `ΔW` is an evolving adapter by default; the
//! ablation flags swap in the simpler alternatives.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Modality, PromptSet, PromptValues};
use crate::evolution::{AdapterState, EvolutionSchedule, Factors};
use crate::numcore::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppConfig {
    /// First prompted layer (J, 1-based).
    pub first_layer: usize,
    /// Last layer (L).
    pub last_layer: usize,
    /// Prompt length (l); must equal `num_vectors`.
    pub prompt_len: usize,
    /// Rows of the embedding space (K).
    pub num_vectors: usize,
    /// Shared dimension (d_r).
    pub shared_dim: usize,
    /// Std of the embedding initialization (σ).
    pub sigma: f64,
    /// Std of the shared (and per-layer) projection weights.
    pub weight_std: f64,
    pub vision_width: usize,
    pub text_width: usize,
}

impl MppConfig {
    /// Defaults sized to an encoder: J = 3 (clamped to L), K = l = 5,
    /// d_r = 16, σ = 0.02, weight std 1/√d_r.
    pub fn for_encoder(enc: &EncoderConfig) -> Self {
        let shared_dim = 16;
        Self {
            first_layer: 3.min(enc.layers),
            last_layer: enc.layers,
            prompt_len: 5,
            num_vectors: 5,
            shared_dim,
            sigma: 0.02,
            weight_std: 1.0 / (shared_dim as f64).sqrt(),
            vision_width: enc.vision_width,
            text_width: enc.text_width,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(1 <= self.first_layer && self.first_layer <= self.last_layer) {
            return Err(Error::Config(format!("need 1 <= J <= L, got J={} L={}", self.first_layer, self.last_layer)));
        }
        if self.prompt_len != self.num_vectors {
            return Err(Error::Config(format!(
                "prompt length {} must equal the number of embedding vectors {}",
                self.prompt_len, self.num_vectors
            )));
        }
        if self.num_vectors == 0 || self.shared_dim == 0 || self.vision_width == 0 || self.text_width == 0 {
            return Err(Error::Config("projector extents must be positive".into()));
        }
        if !(self.sigma > 0.0) || !(self.weight_std > 0.0) {
            return Err(Error::Config("initialization std must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => self.vision_width,
            Modality::Text => self.text_width,
        }
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.first_layer..=self.last_layer
    }

    pub fn span(&self) -> usize {
        self.last_layer + 1 - self.first_layer
    }
}

/// Structural ablations of the projector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Independent `l×d_m` prompts per layer; no embedding, no projector.
    pub no_mpp: bool,
    /// Independent full `W_i` per layer instead of one shared weight.
    pub no_shared: bool,
    /// Dense trainable update instead of `A·B`.
    pub full_rank: bool,
    /// One update per layer trained throughout; no history, no magnitudes.
    pub no_evolution: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), Error> {
        if self.no_mpp && self.no_shared {
            return Err(Error::Config("no_mpp and no_shared cannot be combined".into()));
        }
        Ok(())
    }

    pub fn evolving(&self) -> bool {
        !self.no_mpp && !self.no_evolution
    }
}

/// Seeded `N(0, σ²)` embedding space with gradient tracking.
pub fn init_embedding(k: usize, shared_dim: usize, sigma: f64, seed: u64) -> Result<Tensor, Error> {
    if k == 0 || shared_dim == 0 {
        return Err(Error::Parameter("embedding extents must be positive".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::randn(vec![k, shared_dim], sigma, &mut rng).with_grad())
}

/// `P = E · W`.
pub fn project(tape: &mut Tape, e: Var, w: Var) -> Result<Var, Error> {
    let (_, er) = tape.value(e).dims2()?;
    let (wr, _) = tape.value(w).dims2()?;
    if er != wr {
        return Err(Error::Num(crate::numcore::NumError::Dimension(format!(
            "embedding width {er} vs projector rows {wr}"
        ))));
    }
    Ok(tape.matmul(e, w)?)
}

/// Per-(layer, modality) update feeding into `W_i`.
#[derive(Clone, Debug)]
pub enum LayerAdapter {
    Evolving(AdapterState),
    /// Plain factors added directly (`W_shared + A·B`).
    Static(Factors),
}

/// All trainable state that produces prompts.
#[derive(Clone, Debug)]
pub struct PromptProjector {
    cfg: MppConfig,
    arch: Architecture,
    eps: f64,
    embedding: Option<ParamId>,
    shared: BTreeMap<Modality, ParamId>,
    layer_base: BTreeMap<(usize, Modality), ParamId>,
    adapters: BTreeMap<(usize, Modality), LayerAdapter>,
    direct: BTreeMap<(usize, Modality), ParamId>,
}

impl PromptProjector {
    /// Allocates trainable state in `store`. `first_rank` is the adapter
    /// rank for epoch 1 (ignored for dense adapters).
    pub fn new<R: Rng + ?Sized>(
        cfg: MppConfig,
        arch: Architecture,
        store: &mut ParamStore,
        first_rank: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self, Error> {
        cfg.validate()?;
        arch.validate()?;
        let mut p = Self {
            cfg,
            arch,
            eps,
            embedding: None,
            shared: BTreeMap::new(),
            layer_base: BTreeMap::new(),
            adapters: BTreeMap::new(),
            direct: BTreeMap::new(),
        };
        let c = p.cfg.clone();
        if arch.no_mpp {
            for layer in c.layers() {
                for m in Modality::BOTH {
                    let t = Tensor::randn(vec![c.prompt_len, c.width(m)], c.sigma, rng);
                    p.direct.insert((layer, m), store.insert(format!("prompt.{layer}.{}", m.tag()), t));
                }
            }
            return Ok(p);
        }
        let e = Tensor::randn(vec![c.num_vectors, c.shared_dim], c.sigma, rng);
        p.embedding = Some(store.insert("embedding", e));
        for m in Modality::BOTH {
            if arch.no_shared {
                for layer in c.layers() {
                    let w = Tensor::randn(vec![c.shared_dim, c.width(m)], c.weight_std, rng);
                    p.layer_base.insert((layer, m), store.insert(format!("weight.{layer}.{}", m.tag()), w));
                }
            } else {
                let w = Tensor::randn(vec![c.shared_dim, c.width(m)], c.weight_std, rng);
                p.shared.insert(m, store.insert(format!("shared.{}", m.tag()), w));
            }
        }
        let rank = if arch.full_rank { None } else { Some(first_rank) };
        for layer in c.layers() {
            for m in Modality::BOTH {
                let adapter = if arch.no_evolution {
                    let name = format!("lora.{layer}.{}", m.tag());
                    LayerAdapter::Static(Factors::spawn(store, &name, c.shared_dim, c.width(m), rank, rng)?)
                } else {
                    let mut st = AdapterState::new(layer, m, c.shared_dim, c.width(m));
                    st.spawn_epoch(store, rank, rng)?;
                    LayerAdapter::Evolving(st)
                };
                p.adapters.insert((layer, m), adapter);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &MppConfig {
        &self.cfg
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn embedding(&self) -> Option<ParamId> {
        self.embedding
    }

    pub fn shared(&self, m: Modality) -> Option<ParamId> {
        self.shared.get(&m).copied()
    }

    pub fn adapters(&self) -> impl Iterator<Item = (&(usize, Modality), &LayerAdapter)> {
        self.adapters.iter()
    }

    pub fn evolving_adapters(&self) -> impl Iterator<Item = &AdapterState> {
        self.adapters.values().filter_map(|a| match a {
            LayerAdapter::Evolving(s) => Some(s),
            LayerAdapter::Static(_) => None,
        })
    }

    /// Composed projector weight `W_i^m` for one layer.
    pub fn layer_weight(&self, tape: &mut Tape, binds: &Bindings, layer: usize, m: Modality) -> Result<Var, Error> {
        let base = match self.shared.get(&m) {
            Some(&id) => binds.var(id)?,
            None => binds.var(
                *self
                    .layer_base
                    .get(&(layer, m))
                    .ok_or_else(|| Error::Config(format!("no projector weight for layer {layer} {m}")))?,
            )?,
        };
        let delta = match self.adapters.get(&(layer, m)) {
            Some(LayerAdapter::Evolving(st)) => st.compose(tape, binds, self.eps)?,
            Some(LayerAdapter::Static(f)) => f.product(tape, binds)?,
            None => return Ok(base),
        };
        Ok(tape.add(base, delta)?)
    }

    /// Prompts for every layer `J..=L` and both modalities.
    pub fn prompts(&self, tape: &mut Tape, binds: &Bindings) -> Result<PromptSet, Error> {
        let mut set = PromptSet::new(self.cfg.first_layer);
        if self.arch.no_mpp {
            for (&(layer, m), &id) in &self.direct {
                set.insert(layer, m, binds.var(id)?);
            }
            return Ok(set);
        }
        let e = binds.var(self.embedding.ok_or_else(|| Error::Contract("missing embedding".into()))?)?;
        for layer in self.cfg.layers() {
            for m in Modality::BOTH {
                let w = self.layer_weight(tape, binds, layer, m)?;
                set.insert(layer, m, project(tape, e, w)?);
            }
        }
        Ok(set)
    }

    /// Evaluated prompts from current parameter values.
    pub fn prompt_values(&self, store: &ParamStore) -> Result<PromptValues, Error> {
        let mut tape = Tape::new();
        let binds = store.bind_frozen(&mut tape)?;
        let set = self.prompts(&mut tape, &binds)?;
        let mut out = PromptValues { first_layer: self.cfg.first_layer, entries: BTreeMap::new() };
        for layer in self.cfg.layers() {
            for m in Modality::BOTH {
                let v = set.get(layer, m).ok_or_else(|| Error::Contract("prompt missing".into()))?;
                out.entries.insert((layer, m), Arc::new(tape.value(v).detached()));
            }
        }
        Ok(out)
    }

    /// Freezes every evolving adapter and spawns fresh factors at `next_rank`.
    pub fn transition<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        next_rank: usize,
        rng: &mut R,
    ) -> Result<(), Error> {
        let rank = if self.arch.full_rank { None } else { Some(next_rank) };
        for adapter in self.adapters.values_mut() {
            if let LayerAdapter::Evolving(st) = adapter {
                st.freeze_epoch(store, self.eps)?;
                st.spawn_epoch(store, rank, rng)?;
            }
        }
        Ok(())
    }

    /// Fails if any frozen direction changed since it was frozen.
    pub fn verify_history(&self) -> Result<(), Error> {
        self.evolving_adapters().try_for_each(AdapterState::verify_history)
    }
}

/// Itemized trainable-scalar count.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embedding: usize,
    pub shared: usize,
    /// Independent per-layer projector weights (`no_shared`).
    pub layer_weights: usize,
    /// Independent per-layer prompts (`no_mpp`).
    pub prompts: usize,
    pub vision_adapters: usize,
    pub text_adapters: usize,
    /// Live trainable scalars right now.
    pub total: usize,
    /// Adapter scalars trained at any point up to this epoch, counting
    /// retired factors: `Σ_t [r^t(d_r + d_m) + 1]` per (layer, modality).
    pub cumulative_adapters: usize,
}

/// Closed-form trainable count during epoch `ranks.len()`, where `ranks[t-1]`
/// is the adapter rank of epoch `t`. A rank of 0 disables adapters.
pub fn param_count(cfg: &MppConfig, arch: &Architecture, ranks: &[usize]) -> ParamCount {
    let span = cfg.span();
    let mut pc = ParamCount::default();
    if arch.no_mpp {
        pc.prompts = Modality::BOTH.iter().map(|&m| span * cfg.prompt_len * cfg.width(m)).sum();
        pc.total = pc.prompts;
        return pc;
    }
    let dr = cfg.shared_dim;
    pc.embedding = cfg.num_vectors * dr;
    if arch.no_shared {
        pc.layer_weights = Modality::BOTH.iter().map(|&m| span * dr * cfg.width(m)).sum();
    } else {
        pc.shared = Modality::BOTH.iter().map(|&m| dr * cfg.width(m)).sum();
    }
    let epoch = ranks.len().max(1);
    let factor = |r: usize, dm: usize| if arch.full_rank { dr * dm } else { r * (dr + dm) };
    let adapters_enabled = !ranks.is_empty() && ranks.iter().all(|&r| r > 0) || arch.full_rank && !ranks.is_empty();
    for m in Modality::BOTH {
        let dm = cfg.width(m);
        let (live, cumulative) = if !adapters_enabled {
            (0, 0)
        } else if arch.no_evolution {
            let f = factor(ranks[0], dm);
            (f, f)
        } else {
            let current = ranks[epoch - 1];
            let live = factor(current, dm) + epoch;
            let cumulative = ranks.iter().map(|&r| factor(r, dm) + 1).sum();
            (live, cumulative)
        };
        match m {
            Modality::Vision => pc.vision_adapters = span * live,
            Modality::Text => pc.text_adapters = span * live,
        }
        pc.cumulative_adapters += span * cumulative;
    }
    pc.total = pc.embedding + pc.shared + pc.layer_weights + pc.vision_adapters + pc.text_adapters;
    pc
}

/// [`param_count`] for epoch `t` of a schedule; non-evolving variants keep
/// the epoch-1 rank throughout.
pub fn param_count_at(
    cfg: &MppConfig,
    arch: &Architecture,
    schedule: &EvolutionSchedule,
    t: usize,
) -> Result<ParamCount, Error> {
    let ranks = (1..=t).map(|e| schedule.rank_at(e)).collect::<Result<Vec<_>, _>>()?;
    Ok(param_count(cfg, arch, &ranks))
}

/// Trainable count of a per-layer full-weight projector: `(L−J+1)·d_r·d_m`.
pub fn full_weight_baseline(cfg: &MppConfig, m: Modality) -> usize {
    cfg.span() * cfg.shared_dim * cfg.width(m)
}
