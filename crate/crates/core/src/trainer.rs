//! Training loop, ablation variants and experiment drivers.
//!
//! Layers `1..J-1` never see prompts, so each sample's hidden state after
//! layer `J-1` is computed once and reused; only layers `J..L` run on the
//! tape. Frozen (prompt-free) features used by the knowledge-constancy term
//! are cached the same way.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FrozenEncoder, Modality, PromptSet, PromptValues};
use crate::evolution::{EvolutionSchedule, DEFAULT_EPS};
use crate::losses::{self, FeatureBatch, LossTerms, LossValues, LossWeights};
use crate::mpp::{self, Architecture, MppConfig, ParamCount, PromptProjector};
use crate::numcore::{finite_diff_check, Bindings, GradCheckReport, NumError, ParamId, ParamStore, Tape, Tensor};
use crate::tasks::{self, Accuracy, EvalResult, Sample, SyntheticTask, TaskConfig};
use crate::Error;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Any loss term above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_mpp: bool,
    pub no_shared: bool,
    pub full_rank: bool,
    pub no_evolution: bool,
    pub no_kcl: bool,
    pub no_fgr: bool,
}

impl Ablation {
    /// The single-component ablations, in reporting order.
    pub const VARIANTS: [&'static str; 6] = ["no_mpp", "no_shared", "full_rank", "no_evolution", "no_kcl", "no_fgr"];

    /// Parses `full` or one of [`Ablation::VARIANTS`]; `+` combines flags.
    pub fn parse(name: &str) -> Result<Self, Error> {
        let mut a = Self::default();
        for part in name.split('+').map(str::trim) {
            match part {
                "full" => {}
                "no_mpp" => a.no_mpp = true,
                "no_shared" => a.no_shared = true,
                "full_rank" => a.full_rank = true,
                "no_evolution" => a.no_evolution = true,
                "no_kcl" => a.no_kcl = true,
                "no_fgr" => a.no_fgr = true,
                other => return Err(Error::Config(format!("unknown variant '{other}'"))),
            }
        }
        a.validate()?;
        Ok(a)
    }

    pub fn name(&self) -> String {
        let flags = [
            (self.no_mpp, "no_mpp"),
            (self.no_shared, "no_shared"),
            (self.full_rank, "full_rank"),
            (self.no_evolution, "no_evolution"),
            (self.no_kcl, "no_kcl"),
            (self.no_fgr, "no_fgr"),
        ];
        let on: Vec<&str> = flags.iter().filter(|f| f.0).map(|f| f.1).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            no_mpp: self.no_mpp,
            no_shared: self.no_shared,
            full_rank: self.full_rank,
            no_evolution: self.no_evolution,
        }
    }

    /// Loss weights with disabled terms forced to 0.
    pub fn weights(&self, w: LossWeights) -> LossWeights {
        LossWeights {
            gamma: if self.no_fgr { 0.0 } else { w.gamma },
            eta: if self.no_kcl { 0.0 } else { w.eta },
            tau: w.tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Heavy-ball momentum; 0 gives plain gradient descent.
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.01, steps_per_epoch: 4, batch_size: 32, momentum: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub mpp: MppConfig,
    pub evolution: EvolutionSchedule,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub ablation: Ablation,
    pub task: TaskConfig,
    pub seed: u64,
    /// Guard inside Frobenius normalization.
    pub eps: f64,
    /// Run a finite-difference check on the first step of every epoch.
    pub gradcheck_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            mpp: MppConfig::for_encoder(&encoder),
            encoder,
            evolution: EvolutionSchedule::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            ablation: Ablation::default(),
            task: TaskConfig::default(),
            seed: 0,
            eps: DEFAULT_EPS,
            gradcheck_each_epoch: false,
        }
    }
}

impl TrainConfig {
    /// A configuration small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        let encoder = EncoderConfig {
            layers: 2,
            patches: 4,
            patch_dim: 3,
            text_len: 3,
            vision_width: 8,
            text_width: 8,
            embed_dim: 4,
            heads: 2,
            vocab: 16,
            mlp_ratio: 2,
            ..EncoderConfig::default()
        };
        let mpp = MppConfig {
            first_layer: 1,
            last_layer: 2,
            prompt_len: 2,
            num_vectors: 2,
            shared_dim: 4,
            sigma: 0.02,
            weight_std: 0.5,
            vision_width: 8,
            text_width: 8,
        };
        Self {
            encoder,
            mpp,
            evolution: EvolutionSchedule { epochs: 3, mu: 2, nu: 3, r_high: 3, r_mid: 2, r_low: 1 },
            loss: LossWeights { gamma: 25.0, eta: 0.5, tau: 0.1 },
            optim: OptimConfig { lr: 0.01, steps_per_epoch: 2, batch_size: 4, momentum: 0.0 },
            task: TaskConfig { classes: 4, shots: 2, test_per_class: 2, ..TaskConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.encoder.validate()?;
        self.mpp.validate()?;
        if self.mpp.last_layer != self.encoder.layers {
            return Err(Error::Config(format!(
                "prompt span ends at layer {} but the encoder has {} layers",
                self.mpp.last_layer, self.encoder.layers
            )));
        }
        if self.mpp.vision_width != self.encoder.vision_width || self.mpp.text_width != self.encoder.text_width {
            return Err(Error::Config("projector widths must match the encoder widths".into()));
        }
        self.evolution.validate()?;
        self.loss.validate()?;
        self.ablation.validate()?;
        self.task.validate()?;
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and nonnegative, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", o.momentum)));
        }
        if o.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if o.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    /// Builds the frozen encoder and the task tied to it.
    pub fn setup(&self) -> Result<(FrozenEncoder, SyntheticTask), Error> {
        self.validate()?;
        let enc = FrozenEncoder::new(self.encoder.clone())?;
        let task = tasks::generate_task(&self.task, &enc)?;
        Ok((enc, task))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of each term over the epoch's steps.
    pub loss: LossValues,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub trainable_params: usize,
    pub param_audit: ParamCount,
    pub rank: Option<usize>,
    /// Wall-clock seconds; kept out of JSON so reports are reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Magnitude of one direction at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    /// Epoch after which the value was read.
    pub epoch: usize,
    pub layer: usize,
    pub modality: Modality,
    /// Epoch whose factors produced the direction.
    pub origin: usize,
    pub frozen: bool,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub epoch: usize,
    pub parameters: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionRecord {
    pub layer: usize,
    pub modality: Modality,
    pub origin: usize,
    pub norm: f64,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    /// SHA-256 over every live trainable tensor.
    pub trainable_checksum: String,
    pub directions: Vec<DirectionRecord>,
    pub history_lengths: Vec<(usize, Modality, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub variant: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Frozen, prompt-free model on the same test sets.
    pub zero_shot: EvalResult,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub alphas: Vec<AlphaRecord>,
    pub final_eval: EvalResult,
    pub checkpoint: Checkpoint,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gradchecks: Vec<GradCheckSummary>,
}

pub const EPOCH_CSV_HEADER: [&str; 9] =
    ["epoch", "loss_total", "loss_nce", "loss_fgr", "loss_kcl", "base_acc", "novel_acc", "hm", "trainable_params"];

impl TrainReport {
    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "report schema {} is not supported (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn write_epochs_csv<W: Write>(&self, out: W) -> Result<(), Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(EPOCH_CSV_HEADER).map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.loss.total.to_string(),
                e.loss.nce.to_string(),
                e.loss.fgr.to_string(),
                e.loss.kcl.to_string(),
                e.base_acc.to_string(),
                e.novel_acc.to_string(),
                e.hm.to_string(),
                e.trainable_params.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_alphas_csv<W: Write>(&self, out: W) -> Result<(), Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "layer", "modality", "origin", "frozen", "alpha"]).map_err(csv_err)?;
        for a in &self.alphas {
            w.write_record([
                a.epoch.to_string(),
                a.layer.to_string(),
                a.modality.tag().to_string(),
                a.origin.to_string(),
                a.frozen.to_string(),
                a.alpha.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Wall-clock seconds per epoch, kept apart from the reproducible outputs.
    pub fn write_timing_csv<W: Write>(&self, out: W) -> Result<(), Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "wall_seconds"]).map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.3}", e.wall_seconds)]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn novel_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.novel_acc).collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Final α of every frozen direction, indexed `[origin epoch][layer][modality]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTrace {
    pub origins: Vec<usize>,
    pub layers: Vec<usize>,
    /// `values[t][i][m]`, with `m` 0 for vision and 1 for text.
    pub values: Vec<Vec<[f64; 2]>>,
    pub notice: Option<String>,
}

/// Extracts the final magnitude of each frozen direction from a report.
pub fn alpha_trace(report: &TrainReport) -> AlphaTrace {
    let arch = report.config.ablation.architecture();
    if !arch.evolving() {
        return AlphaTrace {
            origins: Vec::new(),
            layers: Vec::new(),
            values: Vec::new(),
            notice: Some(format!("variant {} has no evolving adapters; no magnitudes to trace", report.variant)),
        };
    }
    let last = report.epochs.last().map_or(0, |e| e.epoch);
    let layers: Vec<usize> = report.config.mpp.layers().collect();
    let finals: Vec<&AlphaRecord> = report.alphas.iter().filter(|a| a.epoch == last && a.frozen).collect();
    let mut origins: Vec<usize> = finals.iter().map(|a| a.origin).collect();
    origins.sort_unstable();
    origins.dedup();
    let mut values = vec![vec![[f64::NAN; 2]; layers.len()]; origins.len()];
    for a in finals {
        let t = origins.binary_search(&a.origin).expect("origin collected above");
        let i = layers.iter().position(|&l| l == a.layer).expect("layer within span");
        let m = usize::from(a.modality == Modality::Text);
        values[t][i][m] = a.alpha;
    }
    AlphaTrace { origins, layers, values, notice: None }
}

/// Owns all trainable state for one run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    weights: LossWeights,
    schedule: EvolutionSchedule,
    enc: &'a FrozenEncoder,
    task: &'a SyntheticTask,
    store: ParamStore,
    projector: PromptProjector,
    spawn_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    velocity: BTreeMap<ParamId, Vec<f64>>,
    epoch: usize,
    /// Hidden state after layer J-1 for every training sample.
    train_prefix: Vec<Arc<Tensor>>,
    test_base_prefix: Vec<Arc<Tensor>>,
    test_novel_prefix: Vec<Arc<Tensor>>,
    /// Text hidden state after layer J-1, indexed by global class id.
    text_prefix: Vec<Arc<Tensor>>,
    frozen_train: Vec<Vec<f64>>,
    frozen_text: Vec<Vec<f64>>,
    /// Position of each global class id among the base classes.
    base_index: Vec<Option<usize>>,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, enc: &'a FrozenEncoder, task: &'a SyntheticTask) -> Result<Self, Error> {
        Self::with_schedule(cfg.evolution.clone(), cfg, enc, task)
    }

    /// Like [`Trainer::new`] but training for `schedule.epochs` epochs, which
    /// may exceed the configured count (ranks stay at `r_low` past `nu`).
    pub fn with_schedule(
        schedule: EvolutionSchedule,
        cfg: TrainConfig,
        enc: &'a FrozenEncoder,
        task: &'a SyntheticTask,
    ) -> Result<Self, Error> {
        cfg.validate()?;
        schedule.validate()?;
        if enc.config() != &cfg.encoder {
            return Err(Error::Config("encoder does not match the configuration".into()));
        }
        task.audit_train_split()?;
        let j = cfg.mpp.first_layer;
        let empty = PromptValues::empty();
        let prefix = |samples: &[Sample]| -> Result<Vec<Arc<Tensor>>, Error> {
            samples.iter().map(|s| enc.image_prefix(&s.patches, j - 1)).collect()
        };
        let train_prefix = prefix(&task.train)?;
        let test_base_prefix = prefix(&task.test_base)?;
        let test_novel_prefix = prefix(&task.test_novel)?;
        let text_prefix = task.names.iter().map(|n| enc.text_prefix(n, j - 1)).collect::<Result<Vec<_>, _>>()?;
        let frozen_train =
            task.train.iter().map(|s| enc.encode_image(&s.patches, &empty)).collect::<Result<Vec<_>, _>>()?;
        let frozen_text = task.names.iter().map(|n| enc.encode_text(n, &empty)).collect::<Result<Vec<_>, _>>()?;
        let mut base_index = vec![None; task.config.classes];
        for (i, &c) in task.base.iter().enumerate() {
            base_index[c] = Some(i);
        }

        let mut store = ParamStore::new();
        let mut init_rng = stream(cfg.seed, 2);
        let projector = PromptProjector::new(
            cfg.mpp.clone(),
            cfg.ablation.architecture(),
            &mut store,
            schedule.rank_at(1)?,
            cfg.eps,
            &mut init_rng,
        )?;
        let order: Vec<usize> = (0..task.train.len()).collect();
        Ok(Self {
            weights: cfg.ablation.weights(cfg.loss),
            schedule,
            spawn_rng: stream(cfg.seed, 4),
            order_rng: stream(cfg.seed, 3),
            cfg,
            enc,
            task,
            store,
            projector,
            order,
            cursor: usize::MAX,
            velocity: BTreeMap::new(),
            epoch: 1,
            train_prefix,
            test_base_prefix,
            test_novel_prefix,
            text_prefix,
            frozen_train,
            frozen_text,
            base_index,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn projector(&self) -> &PromptProjector {
        &self.projector
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    /// Next `B` training indices from a reshuffled cyclic order.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let b = self.cfg.optim.batch_size;
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Builds the full objective for `batch` on `tape` from `store` values.
    pub fn batch_loss(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &[usize],
    ) -> Result<(LossTerms, Bindings), Error> {
        let j = self.cfg.mpp.first_layer;
        let binds = store.bind(tape)?;
        let prompts = self.projector.prompts(tape, &binds)?;
        let mut class_rows = Vec::with_capacity(self.task.base.len());
        for &c in &self.task.base {
            let h = tape.constant(&self.text_prefix[c])?;
            class_rows.push(self.enc.forward_from(tape, Modality::Text, h, j, &prompts)?);
        }
        let class_feats = tape.concat_rows(&class_rows)?;
        let mut image_rows = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        let d = self.cfg.encoder.embed_dim;
        let mut frozen_image = Vec::with_capacity(batch.len() * d);
        let mut frozen_text = Vec::with_capacity(batch.len() * d);
        for &i in batch {
            let h = tape.constant(&self.train_prefix[i])?;
            image_rows.push(self.enc.forward_from(tape, Modality::Vision, h, j, &prompts)?);
            let class = self.task.train[i].class;
            labels.push(
                self.base_index[class].ok_or_else(|| Error::Contract(format!("class {class} is not a base class")))?,
            );
            frozen_image.extend_from_slice(&self.frozen_train[i]);
            frozen_text.extend_from_slice(&self.frozen_text[class]);
        }
        let image = tape.concat_rows(&image_rows)?;
        let text = losses::gather_rows(tape, class_feats, &labels)?;
        let fb = FeatureBatch {
            image,
            text,
            labels,
            frozen_image: Arc::new(Tensor::matrix(batch.len(), d, frozen_image)?),
            frozen_text: Arc::new(Tensor::matrix(batch.len(), d, frozen_text)?),
        };
        Ok((losses::total(tape, &fb, class_feats, &self.weights)?, binds))
    }

    fn guard(&self, step: usize, v: &LossValues) -> Result<(), Error> {
        for (name, x) in [("total", v.total), ("nce", v.nce), ("fgr", v.fgr), ("kcl", v.kcl)] {
            if !x.is_finite() || x.abs() > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { epoch: self.epoch, step, detail: format!("loss term {name} = {x}") });
            }
        }
        Ok(())
    }

    /// One gradient step on `batch`; returns the loss before the update.
    pub fn step(&mut self, step: usize, batch: &[usize]) -> Result<LossValues, Error> {
        let mut tape = Tape::new();
        let (terms, binds) = self.batch_loss(&self.store, &mut tape, batch).map_err(|e| self.as_divergence(step, e))?;
        let values = terms.values(&tape);
        self.guard(step, &values)?;
        let grads = tape.backward(terms.total).map_err(|e| self.as_divergence(step, e.into()))?;
        let lr = self.cfg.optim.lr;
        let mu = self.cfg.optim.momentum;
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(binds.var(id)?) else { continue };
            let t = self.store.get_mut(id)?;
            if mu > 0.0 {
                let v = self.velocity.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                for ((p, vi), gi) in t.values_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = mu * *vi + gi;
                    *p -= lr * *vi;
                }
            } else {
                for (p, gi) in t.values_mut().iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            if !t.is_finite() {
                return Err(Error::Divergence {
                    epoch: self.epoch,
                    step,
                    detail: format!("parameter {id:?} became non-finite"),
                });
            }
        }
        Ok(values)
    }

    fn as_divergence(&self, step: usize, e: Error) -> Error {
        match e {
            Error::Num(NumError::NonFinite(what)) => {
                Error::Divergence { epoch: self.epoch, step, detail: format!("non-finite value in {what}") }
            }
            other => other,
        }
    }

    /// Finite-difference check of the full objective over every live
    /// trainable scalar.
    pub fn gradcheck(&self, batch: &[usize], h: f64) -> Result<GradCheckReport, Error> {
        let theta = self.store.flat_values();
        let mut scratch = self.store.clone();
        let report = finite_diff_check(&theta, h, |th| {
            scratch.set_flat_values(th)?;
            scratch.zero_grad();
            let mut tape = Tape::new();
            let (terms, binds) =
                self.batch_loss(&scratch, &mut tape, batch).map_err(|e| NumError::Contract(e.to_string()))?;
            let grads = tape.backward(terms.total)?;
            scratch.accumulate(&grads, &binds)?;
            Ok((tape.scalar(terms.total), scratch.flat_grads()))
        })?;
        Ok(report)
    }

    /// Freezes the active directions and spawns the factors of epoch `epoch + 1`.
    pub fn advance_epoch(&mut self) -> Result<(), Error> {
        let next = self.epoch + 1;
        self.projector.transition(&mut self.store, self.schedule.rank_at(next)?, &mut self.spawn_rng)?;
        let live: Vec<ParamId> = self.store.iter().map(|(id, _, _)| id).collect();
        self.velocity.retain(|id, _| live.contains(id));
        self.epoch = next;
        Ok(())
    }

    /// Live trainable count checked against the closed form.
    pub fn audit(&self) -> Result<(usize, ParamCount), Error> {
        let live = self.store.scalar_count();
        let closed = mpp::param_count_at(&self.cfg.mpp, &self.cfg.ablation.architecture(), &self.schedule, self.epoch)?;
        if live != closed.total {
            return Err(Error::Contract(format!(
                "epoch {}: {live} live trainable scalars but the closed form gives {}",
                self.epoch, closed.total
            )));
        }
        Ok((live, closed))
    }

    /// Class features of `ids` under the given prompts.
    fn class_features(&self, prompts: &PromptValues, ids: &[usize]) -> Result<Tensor, Error> {
        let j = self.cfg.mpp.first_layer;
        let mut rows = Vec::with_capacity(ids.len() * self.cfg.encoder.embed_dim);
        for &c in ids {
            let mut tape = Tape::new();
            let set = PromptSet::from_values(&mut tape, prompts)?;
            let h = tape.constant(&self.text_prefix[c])?;
            let f = self.enc.forward_from(&mut tape, Modality::Text, h, j, &set)?;
            rows.extend_from_slice(tape.value(f).values());
        }
        Ok(Tensor::matrix(ids.len(), self.cfg.encoder.embed_dim, rows)?)
    }

    fn accuracy(
        &self,
        prompts: &PromptValues,
        samples: &[Sample],
        prefix: &[Arc<Tensor>],
        ids: &[usize],
    ) -> Result<Accuracy, Error> {
        let j = self.cfg.mpp.first_layer;
        let feats = self.class_features(prompts, ids)?;
        let mut k = 0;
        tasks::evaluate(
            |_| {
                let mut tape = Tape::new();
                let set = PromptSet::from_values(&mut tape, prompts)?;
                let h = tape.constant(&prefix[k])?;
                k += 1;
                let f = self.enc.forward_from(&mut tape, Modality::Vision, h, j, &set)?;
                Ok(tape.value(f).values().to_vec())
            },
            samples,
            ids,
            &feats,
            self.cfg.loss.tau,
        )
    }

    /// Base and novel accuracy of the current prompts.
    pub fn evaluate(&self) -> Result<EvalResult, Error> {
        let prompts = self.projector.prompt_values(&self.store)?;
        let base = self.accuracy(&prompts, &self.task.test_base, &self.test_base_prefix, &self.task.base)?;
        let novel = self.accuracy(&prompts, &self.task.test_novel, &self.test_novel_prefix, &self.task.novel)?;
        Ok(EvalResult::new(self.task, &base, &novel))
    }

    fn alpha_records(&self) -> Result<Vec<AlphaRecord>, Error> {
        let mut out = Vec::new();
        for st in self.projector.evolving_adapters() {
            for (h, &alpha) in st.history().iter().zip(&st.alphas(&self.store)?) {
                out.push(AlphaRecord {
                    epoch: self.epoch,
                    layer: st.layer,
                    modality: st.modality,
                    origin: h.epoch,
                    frozen: true,
                    alpha,
                });
            }
            if let Some(a) = st.active() {
                let alpha = self.store.get(a.alpha)?.values()[0];
                out.push(AlphaRecord {
                    epoch: self.epoch,
                    layer: st.layer,
                    modality: st.modality,
                    origin: a.epoch,
                    frozen: false,
                    alpha,
                });
            }
        }
        Ok(out)
    }

    fn checkpoint(&self, encoder_before: String) -> Result<Checkpoint, Error> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (_, name, t) in self.store.iter() {
            h.update(name.as_bytes());
            h.update(t.checksum().as_bytes());
        }
        let mut directions = Vec::new();
        let mut history_lengths = Vec::new();
        for st in self.projector.evolving_adapters() {
            history_lengths.push((st.layer, st.modality, st.history().len()));
            for d in st.history() {
                directions.push(DirectionRecord {
                    layer: st.layer,
                    modality: st.modality,
                    origin: d.epoch,
                    norm: crate::numcore::frobenius_norm(&d.direction)?,
                    checksum: d.checksum.clone(),
                });
            }
        }
        Ok(Checkpoint {
            encoder_checksum_before: encoder_before,
            encoder_checksum_after: self.enc.checksum(),
            trainable_checksum: hex::encode(h.finalize()),
            directions,
            history_lengths,
        })
    }

    /// Runs every epoch and assembles the report.
    pub fn run(&mut self) -> Result<TrainReport, Error> {
        let encoder_before = self.enc.checksum();
        let zero_shot = tasks::zero_shot(self.enc, self.task, self.cfg.loss.tau)?;
        let mut epochs = Vec::with_capacity(self.schedule.epochs);
        let mut steps = Vec::new();
        let mut alphas = Vec::new();
        let mut gradchecks = Vec::new();
        let mut last_eval = zero_shot.clone();
        for epoch in 1..=self.schedule.epochs {
            let started = Instant::now();
            if epoch > 1 {
                self.advance_epoch()?;
            }
            let (live, audit) = self.audit()?;
            let mut sums = LossValues::default();
            for step in 1..=self.cfg.optim.steps_per_epoch {
                let batch = self.next_batch();
                if step == 1 && self.cfg.gradcheck_each_epoch {
                    let r = self.gradcheck(&batch, 1e-6)?;
                    if !r.passes(1e-4) {
                        return Err(Error::Num(NumError::NumericGuard(format!(
                            "gradient check failed at epoch {epoch}: max relative error {:e}",
                            r.max_rel_error
                        ))));
                    }
                    gradchecks.push(GradCheckSummary {
                        epoch,
                        parameters: r.parameters,
                        max_rel_error: r.max_rel_error,
                    });
                }
                let v = self.step(step, &batch)?;
                sums.total += v.total;
                sums.nce += v.nce;
                sums.fgr += v.fgr;
                sums.kcl += v.kcl;
                steps.push(StepRecord { epoch, step, loss: v });
            }
            self.projector.verify_history()?;
            let n = self.cfg.optim.steps_per_epoch as f64;
            let loss = LossValues { total: sums.total / n, nce: sums.nce / n, fgr: sums.fgr / n, kcl: sums.kcl / n };
            let eval = self.evaluate()?;
            alphas.extend(self.alpha_records()?);
            let arch = self.cfg.ablation.architecture();
            epochs.push(EpochRecord {
                epoch,
                loss,
                base_acc: eval.base_acc,
                novel_acc: eval.novel_acc,
                hm: eval.hm,
                trainable_params: live,
                param_audit: audit,
                rank: (arch.evolving() && !arch.full_rank).then(|| self.schedule.rank_at(epoch)).transpose()?,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            last_eval = eval;
        }
        let checkpoint = self.checkpoint(encoder_before)?;
        if checkpoint.encoder_checksum_before != checkpoint.encoder_checksum_after {
            return Err(Error::Contract("frozen encoder changed during training".into()));
        }
        Ok(TrainReport {
            schema_version: REPORT_SCHEMA_VERSION,
            variant: self.cfg.ablation.name(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            zero_shot,
            epochs,
            steps,
            alphas,
            final_eval: last_eval,
            checkpoint,
            gradchecks,
        })
    }
}

/// Trains `cfg` on `task` for the configured number of epochs.
pub fn train(cfg: &TrainConfig, enc: &FrozenEncoder, task: &SyntheticTask) -> Result<TrainReport, Error> {
    Trainer::new(cfg.clone(), enc, task)?.run()
}

/// Trains with `flags` replacing the configured ablation flags.
pub fn ablate(
    cfg: &TrainConfig,
    flags: Ablation,
    enc: &FrozenEncoder,
    task: &SyntheticTask,
) -> Result<TrainReport, Error> {
    flags.validate()?;
    let cfg = TrainConfig { ablation: flags, ..cfg.clone() };
    train(&cfg, enc, task)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub variant: String,
    pub epochs: Vec<usize>,
    pub base_acc: Vec<f64>,
    pub novel_acc: Vec<f64>,
    pub hm: Vec<f64>,
    /// Highest novel accuracy minus the final one.
    pub novel_drop: f64,
    pub final_hm: f64,
}

impl Curve {
    pub fn from_report(r: &TrainReport) -> Self {
        let novel = r.novel_curve();
        let peak = novel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let last = novel.last().copied().unwrap_or(0.0);
        Self {
            variant: r.variant.clone(),
            epochs: r.epochs.iter().map(|e| e.epoch).collect(),
            base_acc: r.epochs.iter().map(|e| e.base_acc).collect(),
            novel_acc: novel,
            hm: r.epochs.iter().map(|e| e.hm).collect(),
            novel_drop: if last.is_finite() && peak.is_finite() { peak - last } else { 0.0 },
            final_hm: r.epochs.last().map_or(0.0, |e| e.hm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakpointResult {
    pub extended_epochs: usize,
    pub full: Curve,
    pub no_evolution: Curve,
}

/// Trains the configured model and its `no_evolution` counterpart for
/// `extended_epochs` and returns both accuracy curves.
pub fn breakpoint_experiment(
    cfg: &TrainConfig,
    enc: &FrozenEncoder,
    task: &SyntheticTask,
    extended_epochs: usize,
) -> Result<BreakpointResult, Error> {
    if extended_epochs < 2 * cfg.evolution.epochs {
        return Err(Error::Config(format!(
            "breakpoint needs at least {} epochs, got {extended_epochs}",
            2 * cfg.evolution.epochs
        )));
    }
    let schedule = cfg.evolution.with_epochs(extended_epochs);
    let run = |ablation: Ablation| -> Result<TrainReport, Error> {
        let c = TrainConfig { ablation, ..cfg.clone() };
        Trainer::with_schedule(schedule.clone(), c, enc, task)?.run()
    };
    let full = run(Ablation { no_evolution: false, ..cfg.ablation })?;
    let frozen = run(Ablation { no_evolution: true, ..cfg.ablation })?;
    Ok(BreakpointResult { extended_epochs, full: Curve::from_report(&full), no_evolution: Curve::from_report(&frozen) })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
