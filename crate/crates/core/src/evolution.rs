//! Trajectory-aware adapters.
//!
//! An adapter update is split into a scalar magnitude and a unit-Frobenius
//! direction. At each epoch boundary the active direction is frozen into a
//! history entry whose magnitude stays trainable, and fresh factors are
//! spawned at the next scheduled rank:
//!
//! ```text
//! ΔW = Σ_{t<T} α_t · D_t  +  α_T · AB / (‖AB‖_F + ε)
//! ```

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Modality;
use crate::numcore::{normalize_frobenius, Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Error;

/// Magnitude given to freshly spawned directions.
pub const ALPHA_INIT: f64 = 0.01;
/// Standard deviation of freshly spawned factors.
pub const FACTOR_STD: f64 = 0.02;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Stepwise rank plan: `r_high` before `mu`, `r_mid` on `[mu, nu)`, `r_low` from `nu`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionSchedule {
    pub epochs: usize,
    pub mu: usize,
    pub nu: usize,
    pub r_high: usize,
    pub r_mid: usize,
    pub r_low: usize,
}

impl Default for EvolutionSchedule {
    fn default() -> Self {
        Self { epochs: 10, mu: 4, nu: 8, r_high: 4, r_mid: 2, r_low: 1 }
    }
}

impl EvolutionSchedule {
    pub fn validate(&self) -> Result<(), Error> {
        if !(1 < self.mu && self.mu < self.nu && self.nu <= self.epochs) {
            return Err(Error::Config(format!(
                "need 1 < mu < nu <= epochs, got mu={} nu={} epochs={}",
                self.mu, self.nu, self.epochs
            )));
        }
        if !(self.r_high > self.r_mid && self.r_mid > self.r_low && self.r_low > 0) {
            return Err(Error::Config(format!(
                "ranks must be positive and strictly decreasing, got {}/{}/{}",
                self.r_high, self.r_mid, self.r_low
            )));
        }
        Ok(())
    }

    /// Rank for epoch `t` (1-based).
    pub fn rank_at(&self, t: usize) -> Result<usize, Error> {
        if t == 0 || t > self.epochs {
            return Err(Error::Parameter(format!("epoch {t} outside 1..={}", self.epochs)));
        }
        Ok(if t < self.mu {
            self.r_high
        } else if t < self.nu {
            self.r_mid
        } else {
            self.r_low
        })
    }

    /// The same drop points over a different total epoch count.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        Self { epochs, ..self.clone() }
    }
}

/// Trainable factors whose product is the raw (unnormalized) update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factors {
    /// `A (d_r×r) · B (r×d_m)`.
    LowRank { a: ParamId, b: ParamId, rank: usize },
    /// A dense `d_r×d_m` matrix (full-rank ablation).
    Dense { w: ParamId },
}

impl Factors {
    /// Fresh factors drawn from `N(0, FACTOR_STD²)`; `rank = None` means dense.
    pub fn spawn<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        rank: Option<usize>,
        rng: &mut R,
    ) -> Result<Self, Error> {
        match rank {
            Some(0) => Err(Error::Parameter("rank must be positive".into())),
            Some(r) => {
                let a = store.insert(format!("{name}.A"), Tensor::randn(vec![rows, r], FACTOR_STD, rng));
                let b = store.insert(format!("{name}.B"), Tensor::randn(vec![r, cols], FACTOR_STD, rng));
                Ok(Factors::LowRank { a, b, rank: r })
            }
            None => {
                let w = store.insert(format!("{name}.W"), Tensor::randn(vec![rows, cols], FACTOR_STD, rng));
                Ok(Factors::Dense { w })
            }
        }
    }

    pub fn product(&self, tape: &mut Tape, binds: &Bindings) -> Result<Var, Error> {
        Ok(match *self {
            Factors::LowRank { a, b, .. } => tape.matmul(binds.var(a)?, binds.var(b)?)?,
            Factors::Dense { w } => binds.var(w)?,
        })
    }

    /// Eager product from current parameter values.
    pub fn product_value(&self, store: &ParamStore) -> Result<Tensor, Error> {
        match *self {
            Factors::LowRank { a, b, .. } => matmul_values(store.get(a)?, store.get(b)?),
            Factors::Dense { w } => Ok(store.get(w)?.detached()),
        }
    }

    pub fn retire(&self, store: &mut ParamStore) -> Result<(), Error> {
        match *self {
            Factors::LowRank { a, b, .. } => {
                store.retire(a)?;
                store.retire(b)?;
            }
            Factors::Dense { w } => {
                store.retire(w)?;
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match *self {
            Factors::LowRank { a, b, .. } => vec![a, b],
            Factors::Dense { w } => vec![w],
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match *self {
            Factors::LowRank { rank, .. } => Some(rank),
            Factors::Dense { .. } => None,
        }
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor, Error> {
    let mut tape = Tape::new();
    let av = tape.leaf(&a.detached())?;
    let bv = tape.leaf(&b.detached())?;
    let p = tape.matmul(av, bv)?;
    Ok(tape.value(p).detached())
}

/// In-graph decoupling: `(‖AB‖_F, AB / (‖AB‖_F + ε))`.
pub fn decouple(tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<(Var, Var), Error> {
    let p = tape.matmul(a, b)?;
    let norm = tape.frobenius_norm(p)?;
    let dir = tape.normalize_frobenius(p, eps)?;
    Ok((norm, dir))
}

/// Eager decoupling of factor values, as used when snapshotting.
pub fn decouple_values(a: &Tensor, b: &Tensor, eps: f64) -> Result<(f64, Tensor), Error> {
    let p = matmul_values(a, b)?;
    let norm = crate::numcore::frobenius_norm(&p)?;
    Ok((norm, normalize_frobenius(&p, eps)?))
}

/// `m / ‖m‖_F` exactly, so a frozen direction has unit norm to roundoff
/// however small the product was. A product with norm at or below `eps`
/// freezes as the eps-guarded (near-zero) direction instead.
fn unit_direction(m: &Tensor, eps: f64) -> Result<Tensor, Error> {
    let norm = crate::numcore::frobenius_norm(m)?;
    if norm <= eps {
        return Ok(normalize_frobenius(m, eps)?);
    }
    let values = m.values().iter().map(|v| v / norm).collect();
    Ok(Tensor::new(m.shape().to_vec(), values)?)
}

/// A frozen direction with its still-trainable magnitude.
#[derive(Clone, Debug)]
pub struct HistoryEntry {
    pub alpha: ParamId,
    pub direction: Arc<Tensor>,
    /// SHA-256 of the direction at freeze time.
    pub checksum: String,
    /// Epoch whose active factors produced this direction.
    pub epoch: usize,
}

/// The magnitude and factors currently being trained.
#[derive(Clone, Copy, Debug)]
pub struct ActiveUpdate {
    pub alpha: ParamId,
    pub factors: Factors,
    pub epoch: usize,
}

/// Adapter for one (layer, modality) projector.
#[derive(Clone, Debug)]
pub struct AdapterState {
    pub layer: usize,
    pub modality: Modality,
    rows: usize,
    cols: usize,
    history: Vec<HistoryEntry>,
    active: Option<ActiveUpdate>,
    epoch: usize,
}

impl AdapterState {
    /// An adapter with no history and no active factors; call
    /// [`AdapterState::spawn_epoch`] before use.
    pub fn new(layer: usize, modality: Modality, rows: usize, cols: usize) -> Self {
        Self { layer, modality, rows, cols, history: Vec::new(), active: None, epoch: 0 }
    }

    fn name(&self) -> String {
        format!("adapter.{}.{}", self.layer, self.modality.tag())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn active(&self) -> Option<&ActiveUpdate> {
        self.active.as_ref()
    }

    /// Epoch of the active (or most recently frozen) update.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Allocates fresh factors (`rank = None` for dense) and a magnitude of
    /// [`ALPHA_INIT`] for the next epoch.
    pub fn spawn_epoch<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: Option<usize>,
        rng: &mut R,
    ) -> Result<(), Error> {
        if self.active.is_some() {
            return Err(Error::Contract(format!("{}: spawn while factors are active", self.name())));
        }
        let epoch = self.epoch + 1;
        let name = format!("{}.e{epoch}", self.name());
        let factors = Factors::spawn(store, &name, self.rows, self.cols, rank, rng)?;
        let alpha = store.insert(format!("{name}.alpha"), Tensor::scalar(ALPHA_INIT));
        self.active = Some(ActiveUpdate { alpha, factors, epoch });
        self.epoch = epoch;
        Ok(())
    }

    /// Freezes the active direction into the history and retires its factors.
    pub fn freeze_epoch(&mut self, store: &mut ParamStore, eps: f64) -> Result<(), Error> {
        let Some(active) = self.active.take() else {
            return Err(Error::Contract(format!("{}: epoch {} already frozen", self.name(), self.epoch)));
        };
        let raw = active.factors.product_value(store)?;
        let direction = unit_direction(&raw, eps)?;
        active.factors.retire(store)?;
        let checksum = direction.checksum();
        self.history.push(HistoryEntry {
            alpha: active.alpha,
            direction: Arc::new(direction),
            checksum,
            epoch: active.epoch,
        });
        Ok(())
    }

    /// `Σ α_t D_t + α_T · normalize(active product)`.
    pub fn compose(&self, tape: &mut Tape, binds: &Bindings, eps: f64) -> Result<Var, Error> {
        let mut terms = Vec::with_capacity(self.history.len() + 1);
        for h in &self.history {
            let d = tape.constant(&h.direction)?;
            terms.push(tape.mul_scalar(d, binds.var(h.alpha)?)?);
        }
        if let Some(active) = &self.active {
            let raw = active.factors.product(tape, binds)?;
            let dir = tape.normalize_frobenius(raw, eps)?;
            terms.push(tape.mul_scalar(dir, binds.var(active.alpha)?)?);
        }
        let Some((&first, rest)) = terms.split_first() else {
            let z = Arc::new(Tensor::zeros(vec![self.rows, self.cols]));
            return Ok(tape.constant(&z)?);
        };
        let mut acc = first;
        for &t in rest {
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Eager ΔW from current values.
    pub fn compose_value(&self, store: &ParamStore, eps: f64) -> Result<Tensor, Error> {
        let mut tape = Tape::new();
        let binds = store.bind_frozen(&mut tape)?;
        let v = self.compose(&mut tape, &binds, eps)?;
        Ok(tape.value(v).detached())
    }

    /// Magnitudes in history order, followed by the active one.
    pub fn alphas(&self, store: &ParamStore) -> Result<Vec<f64>, Error> {
        let mut out = Vec::with_capacity(self.history.len() + 1);
        for h in &self.history {
            out.push(store.get(h.alpha)?.values()[0]);
        }
        if let Some(a) = &self.active {
            out.push(store.get(a.alpha)?.values()[0]);
        }
        Ok(out)
    }

    /// Trainable scalars owned by this adapter.
    pub fn trainable_count(&self, store: &ParamStore) -> Result<usize, Error> {
        let mut n = self.history.len();
        if let Some(a) = &self.active {
            n += 1;
            for id in a.factors.ids() {
                n += store.get(id)?.len();
            }
        }
        Ok(n)
    }

    /// Every frozen direction still matches the checksum taken at freeze time.
    pub fn verify_history(&self) -> Result<(), Error> {
        for h in &self.history {
            if h.direction.checksum() != h.checksum {
                return Err(Error::Contract(format!(
                    "{}: direction from epoch {} changed after freezing",
                    self.name(),
                    h.epoch
                )));
            }
        }
        Ok(())
    }
}
