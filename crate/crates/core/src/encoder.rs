//! A small frozen dual encoder with per-layer prompt injection.
//!
//! Both towers are pre-norm transformer stacks. The vision tower reads
//! `[class, patches…]` and pools the class row; the text tower reads
//! `[start, tokens…, end]` and pools the end row. From the first prompted
//! layer on, the previous layer's prompt rows are dropped and the fresh
//! prompt for the current layer is inserted, so the sequence is always
//! `base + l` rows long inside the prompted span.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{Tape, Tensor, Var};
use crate::Error;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Vision, Modality::Text];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Vision => "v",
            Modality::Text => "t",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Transformer blocks per tower (L).
    pub layers: usize,
    /// Patches per image (M).
    pub patches: usize,
    /// Length of one raw patch vector.
    pub patch_dim: usize,
    /// Content tokens per text sequence (N).
    pub text_len: usize,
    pub vision_width: usize,
    pub text_width: usize,
    /// Joint feature dimension (d).
    pub embed_dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
    pub seed: u64,
    pub causal_text: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            patches: 16,
            patch_dim: 12,
            text_len: 8,
            vision_width: 32,
            text_width: 32,
            embed_dim: 16,
            heads: 4,
            vocab: 64,
            mlp_ratio: 4,
            init_std: 0.02,
            seed: 0,
            causal_text: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let extents = [
            self.layers,
            self.patches,
            self.patch_dim,
            self.text_len,
            self.vision_width,
            self.text_width,
            self.embed_dim,
            self.heads,
            self.vocab,
            self.mlp_ratio,
        ];
        if extents.contains(&0) {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if !self.vision_width.is_multiple_of(self.heads) || !self.text_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "widths {}/{} not divisible by {} heads",
                self.vision_width, self.text_width, self.heads
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => self.vision_width,
            Modality::Text => self.text_width,
        }
    }

    /// Rows in the prompt-free sequence of a tower.
    pub fn base_len(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => 1 + self.patches,
            Modality::Text => self.text_len + 2,
        }
    }
}

/// Prompt matrices keyed by (layer, modality), covering layers `J..=L`.
///
/// Layers are 1-based. An empty set (`J > L`) leaves the encoder untouched.
#[derive(Clone, Debug, Default)]
pub struct PromptSet {
    first_layer: usize,
    entries: BTreeMap<(usize, Modality), Var>,
}

impl PromptSet {
    pub fn new(first_layer: usize) -> Self {
        Self { first_layer, entries: BTreeMap::new() }
    }

    /// A set that injects nothing.
    pub fn empty() -> Self {
        Self { first_layer: usize::MAX, entries: BTreeMap::new() }
    }

    pub fn first_layer(&self) -> usize {
        self.first_layer
    }

    pub fn insert(&mut self, layer: usize, m: Modality, prompt: Var) {
        self.entries.insert((layer, m), prompt);
    }

    pub fn get(&self, layer: usize, m: Modality) -> Option<Var> {
        self.entries.get(&(layer, m)).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records eager prompt values on `tape` as constants.
    pub fn from_values(tape: &mut Tape, values: &PromptValues) -> Result<Self, Error> {
        let mut set = Self::new(values.first_layer);
        for (&(layer, m), t) in &values.entries {
            set.insert(layer, m, tape.constant(t)?);
        }
        Ok(set)
    }
}

/// Evaluated prompts, shareable across tapes.
#[derive(Clone, Debug, Default)]
pub struct PromptValues {
    pub first_layer: usize,
    pub entries: BTreeMap<(usize, Modality), Arc<Tensor>>,
}

impl PromptValues {
    pub fn empty() -> Self {
        Self { first_layer: usize::MAX, entries: BTreeMap::new() }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: Arc<Tensor>,
    ln1_b: Arc<Tensor>,
    w_qkv: Arc<Tensor>,
    b_qkv: Arc<Tensor>,
    w_o: Arc<Tensor>,
    b_o: Arc<Tensor>,
    ln2_g: Arc<Tensor>,
    ln2_b: Arc<Tensor>,
    w_fc1: Arc<Tensor>,
    b_fc1: Arc<Tensor>,
    w_fc2: Arc<Tensor>,
    b_fc2: Arc<Tensor>,
}

#[derive(Clone, Debug)]
struct Tower {
    blocks: Vec<Block>,
    ln_post_g: Arc<Tensor>,
    ln_post_b: Arc<Tensor>,
    proj: Arc<Tensor>,
}

/// Immutable dual encoder. All weights are shared, never differentiated.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    patch_proj: Arc<Tensor>,
    patch_bias: Arc<Tensor>,
    class_token: Arc<Tensor>,
    vision_pos: Arc<Tensor>,
    token_table: Arc<Tensor>,
    start_token: Arc<Tensor>,
    end_token: Arc<Tensor>,
    text_pos: Arc<Tensor>,
    vision: Tower,
    text: Tower,
}

struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    fn gauss(&mut self, r: usize, c: usize) -> Arc<Tensor> {
        Arc::new(Tensor::randn(vec![r, c], self.std, &mut self.rng))
    }

    fn ones(c: usize) -> Arc<Tensor> {
        Arc::new(Tensor::full(vec![1, c], 1.0))
    }

    fn zeros(c: usize) -> Arc<Tensor> {
        Arc::new(Tensor::zeros(vec![1, c]))
    }

    fn tower(&mut self, layers: usize, w: usize, hidden: usize, out: usize) -> Tower {
        let blocks = (0..layers)
            .map(|_| Block {
                ln1_g: Self::ones(w),
                ln1_b: Self::zeros(w),
                w_qkv: self.gauss(w, 3 * w),
                b_qkv: Self::zeros(3 * w),
                w_o: self.gauss(w, w),
                b_o: Self::zeros(w),
                ln2_g: Self::ones(w),
                ln2_b: Self::zeros(w),
                w_fc1: self.gauss(w, hidden),
                b_fc1: Self::zeros(hidden),
                w_fc2: self.gauss(hidden, w),
                b_fc2: Self::zeros(w),
            })
            .collect();
        Tower { blocks, ln_post_g: Self::ones(w), ln_post_b: Self::zeros(w), proj: self.gauss(w, out) }
    }
}

impl FrozenEncoder {
    /// Seeded Gaussian weights and embeddings standing in for pretraining;
    /// biases start at zero.
    pub fn new(config: EncoderConfig) -> Result<Self, Error> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed), std: config.init_std };
        let c = &config;
        let patch_proj = init.gauss(c.patch_dim, c.vision_width);
        let patch_bias = Init::zeros(c.vision_width);
        let class_token = init.gauss(1, c.vision_width);
        let vision_pos = init.gauss(1 + c.patches, c.vision_width);
        let token_table = init.gauss(c.vocab, c.text_width);
        let start_token = init.gauss(1, c.text_width);
        let end_token = init.gauss(1, c.text_width);
        let text_pos = init.gauss(c.text_len + 2, c.text_width);
        let vision = init.tower(c.layers, c.vision_width, c.mlp_ratio * c.vision_width, c.embed_dim);
        let text = init.tower(c.layers, c.text_width, c.mlp_ratio * c.text_width, c.embed_dim);
        Ok(Self {
            config,
            patch_proj,
            patch_bias,
            class_token,
            vision_pos,
            token_table,
            start_token,
            end_token,
            text_pos,
            vision,
            text,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn tower(&self, m: Modality) -> &Tower {
        match m {
            Modality::Vision => &self.vision,
            Modality::Text => &self.text,
        }
    }

    /// Every weight buffer with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Arc<Tensor>)> {
        let mut out = vec![
            ("patch_proj".to_string(), Arc::clone(&self.patch_proj)),
            ("patch_bias".to_string(), Arc::clone(&self.patch_bias)),
            ("class_token".to_string(), Arc::clone(&self.class_token)),
            ("vision_pos".to_string(), Arc::clone(&self.vision_pos)),
            ("token_table".to_string(), Arc::clone(&self.token_table)),
            ("start_token".to_string(), Arc::clone(&self.start_token)),
            ("end_token".to_string(), Arc::clone(&self.end_token)),
            ("text_pos".to_string(), Arc::clone(&self.text_pos)),
        ];
        for m in Modality::BOTH {
            let t = self.tower(m);
            for (i, b) in t.blocks.iter().enumerate() {
                let fields = [
                    ("ln1_g", &b.ln1_g),
                    ("ln1_b", &b.ln1_b),
                    ("w_qkv", &b.w_qkv),
                    ("b_qkv", &b.b_qkv),
                    ("w_o", &b.w_o),
                    ("b_o", &b.b_o),
                    ("ln2_g", &b.ln2_g),
                    ("ln2_b", &b.ln2_b),
                    ("w_fc1", &b.w_fc1),
                    ("b_fc1", &b.b_fc1),
                    ("w_fc2", &b.w_fc2),
                    ("b_fc2", &b.b_fc2),
                ];
                for (name, w) in fields {
                    out.push((format!("{}.block{}.{name}", m.tag(), i + 1), Arc::clone(w)));
                }
            }
            out.push((format!("{}.ln_post_g", m.tag()), Arc::clone(&t.ln_post_g)));
            out.push((format!("{}.ln_post_b", m.tag()), Arc::clone(&t.ln_post_b)));
            out.push((format!("{}.proj", m.tag()), Arc::clone(&t.proj)));
        }
        out
    }

    /// Rebuilds an encoder from `named_tensors` output (e.g. a snapshot).
    pub fn from_named(config: EncoderConfig, named: &[(String, Tensor)]) -> Result<Self, Error> {
        let mut enc = Self::new(config)?;
        let lookup: BTreeMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let expected = enc.named_tensors();
        if expected.len() != named.len() {
            return Err(Error::Input(format!(
                "snapshot has {} encoder tensors, expected {}",
                named.len(),
                expected.len()
            )));
        }
        let mut replaced: BTreeMap<String, Arc<Tensor>> = BTreeMap::new();
        for (name, t) in expected {
            let Some(src) = lookup.get(name.as_str()) else {
                return Err(Error::Input(format!("snapshot lacks encoder tensor {name}")));
            };
            if src.shape() != t.shape() {
                return Err(Error::Input(format!("shape mismatch for {name}")));
            }
            replaced.insert(name, Arc::new(src.detached()));
        }
        let take = |n: &str| Arc::clone(&replaced[n]);
        enc.patch_proj = take("patch_proj");
        enc.patch_bias = take("patch_bias");
        enc.class_token = take("class_token");
        enc.vision_pos = take("vision_pos");
        enc.token_table = take("token_table");
        enc.start_token = take("start_token");
        enc.end_token = take("end_token");
        enc.text_pos = take("text_pos");
        for m in Modality::BOTH {
            let tag = m.tag();
            let tower = match m {
                Modality::Vision => &mut enc.vision,
                Modality::Text => &mut enc.text,
            };
            for (i, b) in tower.blocks.iter_mut().enumerate() {
                let p = format!("{tag}.block{}.", i + 1);
                b.ln1_g = take(&(p.clone() + "ln1_g"));
                b.ln1_b = take(&(p.clone() + "ln1_b"));
                b.w_qkv = take(&(p.clone() + "w_qkv"));
                b.b_qkv = take(&(p.clone() + "b_qkv"));
                b.w_o = take(&(p.clone() + "w_o"));
                b.b_o = take(&(p.clone() + "b_o"));
                b.ln2_g = take(&(p.clone() + "ln2_g"));
                b.ln2_b = take(&(p.clone() + "ln2_b"));
                b.w_fc1 = take(&(p.clone() + "w_fc1"));
                b.b_fc1 = take(&(p.clone() + "b_fc1"));
                b.w_fc2 = take(&(p.clone() + "w_fc2"));
                b.b_fc2 = take(&(p + "b_fc2"));
            }
            tower.ln_post_g = take(&format!("{tag}.ln_post_g"));
            tower.ln_post_b = take(&format!("{tag}.ln_post_b"));
            tower.proj = take(&format!("{tag}.proj"));
        }
        Ok(enc)
    }

    /// SHA-256 over every weight buffer, for immutability audits.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(t.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `[class; patches · W + b] + positions`, shape `(1+M) × d_v`.
    pub fn embed_image(&self, tape: &mut Tape, patches: &Tensor) -> Result<Var, Error> {
        let c = &self.config;
        if patches.dims2()? != (c.patches, c.patch_dim) {
            return Err(Error::Input(format!(
                "expected {}x{} patches, got {:?}",
                c.patches,
                c.patch_dim,
                patches.shape()
            )));
        }
        let x = tape.leaf(&patches.detached())?;
        self.embed_image_var(tape, x)
    }

    /// [`Self::embed_image`] for patches already on the tape, so gradients
    /// can reach the input.
    pub fn embed_image_var(&self, tape: &mut Tape, x: Var) -> Result<Var, Error> {
        let c = &self.config;
        if tape.value(x).dims2()? != (c.patches, c.patch_dim) {
            return Err(Error::Input(format!("expected {}x{} patches", c.patches, c.patch_dim)));
        }
        let w = tape.constant(&self.patch_proj)?;
        let b = tape.constant(&self.patch_bias)?;
        let cls = tape.constant(&self.class_token)?;
        let pos = tape.constant(&self.vision_pos)?;
        let e = tape.matmul(x, w)?;
        let e = tape.add_row(e, b)?;
        let seq = tape.concat_rows(&[cls, e])?;
        Ok(tape.add(seq, pos)?)
    }

    /// `[start; table[ids]; end] + positions`, shape `(N+2) × d_t`.
    pub fn embed_text(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var, Error> {
        let c = &self.config;
        if ids.len() != c.text_len {
            return Err(Error::Input(format!("expected {} token ids, got {}", c.text_len, ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", c.vocab)));
        }
        let mut rows = Vec::with_capacity((c.text_len + 2) * c.text_width);
        rows.extend_from_slice(self.start_token.values());
        for &id in ids {
            rows.extend_from_slice(self.token_table.row(id));
        }
        rows.extend_from_slice(self.end_token.values());
        let seq = Arc::new(Tensor::matrix(c.text_len + 2, c.text_width, rows)?);
        let seq = tape.constant(&seq)?;
        let pos = tape.constant(&self.text_pos)?;
        Ok(tape.add(seq, pos)?)
    }

    /// Image feature `Φ_v(c_L)` as a 1×d row.
    pub fn forward_vision(&self, tape: &mut Tape, tokens: Var, prompts: &PromptSet) -> Result<Var, Error> {
        self.forward_from(tape, Modality::Vision, tokens, 1, prompts)
    }

    /// Text feature `Φ_t(e_L)` as a 1×d row.
    pub fn forward_text(&self, tape: &mut Tape, ids: &[usize], prompts: &PromptSet) -> Result<Var, Error> {
        let tokens = self.embed_text(tape, ids)?;
        self.forward_from(tape, Modality::Text, tokens, 1, prompts)
    }

    /// Runs layers `start..=L` on a hidden state that has passed layers
    /// `1..start` without prompts, then pools and projects.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        m: Modality,
        hidden: Var,
        start: usize,
        prompts: &PromptSet,
    ) -> Result<Var, Error> {
        let l = self.config.layers;
        let prompt_len = self.check_prompts(tape, m, prompts, start)?;
        let h = self.run_layers(tape, m, hidden, start..=l, prompts)?;
        self.pool(tape, m, h, prompt_len)
    }

    /// Hidden state after layers `1..=upto` with no prompts.
    pub fn prefix(&self, tape: &mut Tape, m: Modality, tokens: Var, upto: usize) -> Result<Var, Error> {
        if upto == 0 {
            return Ok(tokens);
        }
        self.run_layers(tape, m, tokens, 1..=upto, &PromptSet::empty())
    }

    /// Eager image prefix through layers `1..=upto`, for caching.
    pub fn image_prefix(&self, patches: &Tensor, upto: usize) -> Result<Arc<Tensor>, Error> {
        let mut tape = Tape::new();
        let t = self.embed_image(&mut tape, patches)?;
        let h = self.prefix(&mut tape, Modality::Vision, t, upto)?;
        Ok(tape.shared_value(h))
    }

    /// Eager text prefix through layers `1..=upto`, for caching.
    pub fn text_prefix(&self, ids: &[usize], upto: usize) -> Result<Arc<Tensor>, Error> {
        let mut tape = Tape::new();
        let t = self.embed_text(&mut tape, ids)?;
        let h = self.prefix(&mut tape, Modality::Text, t, upto)?;
        Ok(tape.shared_value(h))
    }

    /// Eager image feature.
    pub fn encode_image(&self, patches: &Tensor, prompts: &PromptValues) -> Result<Vec<f64>, Error> {
        let mut tape = Tape::new();
        let set = PromptSet::from_values(&mut tape, prompts)?;
        let t = self.embed_image(&mut tape, patches)?;
        let f = self.forward_vision(&mut tape, t, &set)?;
        Ok(tape.value(f).values().to_vec())
    }

    /// Eager text feature.
    pub fn encode_text(&self, ids: &[usize], prompts: &PromptValues) -> Result<Vec<f64>, Error> {
        let mut tape = Tape::new();
        let set = PromptSet::from_values(&mut tape, prompts)?;
        let f = self.forward_text(&mut tape, ids, &set)?;
        Ok(tape.value(f).values().to_vec())
    }

    /// Validates prompt coverage from `start` on; returns the prompt length
    /// (0 for an empty set).
    fn check_prompts(&self, tape: &Tape, m: Modality, prompts: &PromptSet, start: usize) -> Result<usize, Error> {
        let l = self.config.layers;
        let first = prompts.first_layer();
        if first > l {
            if prompts.entries.keys().any(|&(_, pm)| pm == m) {
                return Err(Error::Config("prompts given beyond the last layer".into()));
            }
            return Ok(0);
        }
        if first == 0 {
            return Err(Error::Config("prompt layers are 1-based".into()));
        }
        if start > first {
            return Err(Error::Config(format!("cannot resume at layer {start} past first prompted layer {first}")));
        }
        let mut len = None;
        for layer in first..=l {
            let Some(p) = prompts.get(layer, m) else {
                return Err(Error::Config(format!("missing {m} prompt for layer {layer}")));
            };
            let (rows, cols) = tape.value(p).dims2()?;
            if cols != self.config.width(m) {
                return Err(Error::Config(format!(
                    "{m} prompt at layer {layer} has {cols} columns, expected {}",
                    self.config.width(m)
                )));
            }
            if *len.get_or_insert(rows) != rows {
                return Err(Error::Config("prompt lengths differ across layers".into()));
            }
        }
        Ok(len.unwrap_or(0))
    }

    /// Where prompt rows sit: after the start token for causal text,
    /// appended at the end otherwise.
    fn prompt_offset(&self, m: Modality) -> usize {
        match m {
            Modality::Text if self.config.causal_text => 1,
            _ => self.config.base_len(m),
        }
    }

    fn run_layers(
        &self,
        tape: &mut Tape,
        m: Modality,
        mut h: Var,
        layers: RangeInclusive<usize>,
        prompts: &PromptSet,
    ) -> Result<Var, Error> {
        let base = self.config.base_len(m);
        let off = self.prompt_offset(m);
        let tower = self.tower(m);
        let causal = m == Modality::Text && self.config.causal_text;
        for layer in layers {
            if let Some(p) = prompts.get(layer, m) {
                let rows = tape.value(h).rows();
                let body = if rows > base {
                    let prev = rows - base;
                    self.remove_rows(tape, h, off, prev)?
                } else {
                    h
                };
                h = self.insert_rows(tape, body, off, p)?;
            }
            h = self.block(tape, &tower.blocks[layer - 1], h, causal)?;
        }
        Ok(h)
    }

    fn remove_rows(&self, tape: &mut Tape, h: Var, at: usize, count: usize) -> Result<Var, Error> {
        let rows = tape.value(h).rows();
        let mut parts = Vec::with_capacity(2);
        if at > 0 {
            parts.push(tape.slice_rows(h, 0, at)?);
        }
        if at + count < rows {
            parts.push(tape.slice_rows(h, at + count, rows - at - count)?);
        }
        Ok(tape.concat_rows(&parts)?)
    }

    fn insert_rows(&self, tape: &mut Tape, h: Var, at: usize, p: Var) -> Result<Var, Error> {
        let rows = tape.value(h).rows();
        let mut parts = Vec::with_capacity(3);
        if at > 0 {
            parts.push(tape.slice_rows(h, 0, at)?);
        }
        parts.push(p);
        if at < rows {
            parts.push(tape.slice_rows(h, at, rows - at)?);
        }
        Ok(tape.concat_rows(&parts)?)
    }

    fn block(&self, tape: &mut Tape, b: &Block, x: Var, causal: bool) -> Result<Var, Error> {
        let (s, w) = tape.value(x).dims2()?;
        let heads = self.config.heads;
        let dh = w / heads;
        let g1 = tape.constant(&b.ln1_g)?;
        let b1 = tape.constant(&b.ln1_b)?;
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let wqkv = tape.constant(&b.w_qkv)?;
        let bqkv = tape.constant(&b.b_qkv)?;
        let qkv = tape.matmul(h, wqkv)?;
        let qkv = tape.add_row(qkv, bqkv)?;
        let mask = if causal { Some(tape.constant(&causal_mask(s))?) } else { None };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for k in 0..heads {
            let q = tape.slice_cols(qkv, k * dh, dh)?;
            let kk = tape.slice_cols(qkv, w + k * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * w + k * dh, dh)?;
            let scores = tape.matmul_t(q, false, kk, true)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(mk) = mask {
                scores = tape.add(scores, mk)?;
            }
            let a = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(a, v)?);
        }
        let o = tape.concat_cols(&outs)?;
        let wo = tape.constant(&b.w_o)?;
        let bo = tape.constant(&b.b_o)?;
        let o = tape.matmul(o, wo)?;
        let o = tape.add_row(o, bo)?;
        let x = tape.add(x, o)?;

        let g2 = tape.constant(&b.ln2_g)?;
        let b2 = tape.constant(&b.ln2_b)?;
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let w1 = tape.constant(&b.w_fc1)?;
        let bb1 = tape.constant(&b.b_fc1)?;
        let w2 = tape.constant(&b.w_fc2)?;
        let bb2 = tape.constant(&b.b_fc2)?;
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, bb1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, bb2)?;
        Ok(tape.add(x, f)?)
    }

    fn pool(&self, tape: &mut Tape, m: Modality, h: Var, prompt_len: usize) -> Result<Var, Error> {
        let rows = tape.value(h).rows();
        let idx = match m {
            Modality::Vision => 0,
            Modality::Text => {
                let base = self.config.base_len(Modality::Text);
                if rows == base {
                    base - 1
                } else if self.config.causal_text {
                    rows - 1
                } else {
                    debug_assert_eq!(rows, base + prompt_len);
                    base - 1
                }
            }
        };
        let tower = self.tower(m);
        let row = tape.slice_rows(h, idx, 1)?;
        let g = tape.constant(&tower.ln_post_g)?;
        let b = tape.constant(&tower.ln_post_b)?;
        let row = tape.layer_norm(row, g, b, LN_EPS)?;
        let proj = tape.constant(&tower.proj)?;
        Ok(tape.matmul(row, proj)?)
    }
}

fn causal_mask(s: usize) -> Arc<Tensor> {
    let mut v = vec![0.0; s * s];
    for i in 0..s {
        for j in i + 1..s {
            v[i * s + j] = MASKED;
        }
    }
    Arc::new(Tensor::matrix(s, s, v).expect("square mask"))
}

/// Cosine similarity between `f` and each row of `class_feats`, then
/// temperature softmax.
pub fn classify(f: &[f64], class_feats: &Tensor, tau: f64) -> Result<Vec<f64>, Error> {
    let (c, d) = class_feats.dims2()?;
    if c < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {c}")));
    }
    if f.len() != d {
        return Err(Error::Input(format!("feature length {} vs class dim {d}", f.len())));
    }
    let scores = cosine_scores(f, class_feats)?;
    Ok(crate::numcore::softmax_temperature(&scores, tau)?)
}

/// Cosine similarity of `f` against each row of `class_feats`.
pub fn cosine_scores(f: &[f64], class_feats: &Tensor) -> Result<Vec<f64>, Error> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nf = norm(f);
    if !(nf > 0.0) {
        return Err(Error::Num(crate::numcore::NumError::NumericGuard("zero-norm image feature".into())));
    }
    (0..class_feats.rows())
        .map(|r| {
            let row = class_feats.row(r);
            let nr = norm(row);
            if !(nr > 0.0) {
                return Err(Error::Num(crate::numcore::NumError::NumericGuard(format!("zero-norm class feature {r}"))));
            }
            Ok(f.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / (nf * nr))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            layers: 4,
            patches: 4,
            patch_dim: 6,
            text_len: 3,
            vision_width: 8,
            text_width: 8,
            embed_dim: 5,
            heads: 2,
            vocab: 10,
            ..EncoderConfig::default()
        }
    }

    fn patches(cfg: &EncoderConfig, seed: u64) -> Tensor {
        Tensor::randn(vec![cfg.patches, cfg.patch_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn prompts(tape: &mut Tape, cfg: &EncoderConfig, first: usize, len: usize, seed: u64) -> PromptSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = PromptSet::new(first);
        for layer in first..=cfg.layers {
            for m in Modality::BOTH {
                let t = Tensor::randn(vec![len, cfg.width(m)], 0.5, &mut rng);
                set.insert(layer, m, tape.variable(t).unwrap());
            }
        }
        set
    }

    #[test]
    fn embed_image_shape_and_determinism() {
        let cfg = small();
        let enc = FrozenEncoder::new(cfg.clone()).unwrap();
        let p = patches(&cfg, 1);
        let mut tape = Tape::new();
        let a = enc.embed_image(&mut tape, &p).unwrap();
        assert_eq!(tape.value(a).shape(), &[5, 8]);
        let enc2 = FrozenEncoder::new(cfg.clone()).unwrap();
        let b = enc2.embed_image(&mut tape, &p).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        let bad = Tensor::zeros(vec![3, 6]);
        assert!(enc.embed_image(&mut tape, &bad).is_err());
    }

    #[test]
    fn zero_patches_embed_to_class_position_and_bias() {
        let cfg = small();
        let enc = FrozenEncoder::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let e = enc.embed_image(&mut tape, &Tensor::zeros(vec![4, 6])).unwrap();
        let out = tape.value(e);
        for j in 0..8 {
            assert_eq!(out.get(0, j), enc.class_token.get(0, j) + enc.vision_pos.get(0, j));
            for r in 1..5 {
                let want = enc.patch_bias.get(0, j) + enc.vision_pos.get(r, j);
                assert!((out.get(r, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_prompt_set_matches_plain_forward() {
        let cfg = small();
        let enc = FrozenEncoder::new(cfg.clone()).unwrap();
        let p = patches(&cfg, 2);
        let mut tape = Tape::new();
        let t = enc.embed_image(&mut tape, &p).unwrap();
        let f = enc.forward_vision(&mut tape, t, &PromptSet::empty()).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 5]);
        assert!(tape.value(f).is_finite());
        // reference: plain block stack with no prompt handling at all
        let mut h = enc.embed_image(&mut tape, &p).unwrap();
        for b in &enc.vision.blocks {
            h = enc.block(&mut tape, b, h, false).unwrap();
        }
        let r = enc.pool(&mut tape, Modality::Vision, h, 0).unwrap();
        assert!(tape.value(f).max_abs_diff(tape.value(r)) <= 1e-12);

        let ft = enc.forward_text(&mut tape, &[1, 2, 3], &PromptSet::empty()).unwrap();
        let mut h = enc.embed_text(&mut tape, &[1, 2, 3]).unwrap();
        for b in &enc.text.blocks {
            h = enc.block(&mut tape, b, h, true).unwrap();
        }
        let r = enc.pool(&mut tape, Modality::Text, h, 0).unwrap();
        assert!(tape.value(ft).max_abs_diff(tape.value(r)) <= 1e-12);
    }

    #[test]
    fn prompt_rows_are_replaced_not_accumulated() {
        let cfg = small();
        let enc = FrozenEncoder::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let set = prompts(&mut tape, &cfg, 3, 2, 9);
        let t = enc.embed_image(&mut tape, &patches(&cfg, 3)).unwrap();
        let h2 = enc.prefix(&mut tape, Modality::Vision, t, 2).unwrap();
        assert_eq!(tape.value(h2).rows(), 5);
        let h3 = enc.run_layers(&mut tape, Modality::Vision, h2, 3..=3, &set).unwrap();
        assert_eq!(tape.value(h3).rows(), 1 + 4 + 2);
        let h4 = enc.run_layers(&mut tape, Modality::Vision, h3, 4..=4, &set).unwrap();
        assert_eq!(tape.value(h4).rows(), 7);

        let tt = enc.embed_text(&mut tape, &[0, 4, 9]).unwrap();
        let ht = enc.run_layers(&mut tape, Modality::Text, tt, 1..=4, &set).unwrap();
        assert_eq!(tape.value(ht).rows(), 5 + 2);
    }

    #[test]
    fn resuming_from_a_cached_prefix_matches_full_forward() {
        let cfg = small();
        let enc = FrozenEncoder::new(cfg.clone()).unwrap();
        let p = patches(&cfg, 4);
        let mut tape = Tape::new();
        let set = prompts(&mut tape, &cfg, 3, 2, 5);
        let t = enc.embed_image(&mut tape, &p).unwrap();
        let full = enc.forward_vision(&mut tape, t, &set).unwrap();
        let cached = enc.image_prefix(&p, 2).unwrap();
        let h = tape.constant(&cached).unwrap();
        let resumed = enc.forward_from(&mut tape, Modality::Vision, h, 3, &set).unwrap();
        assert_eq!(tape.value(full), tape.value(resumed));

        let ids = [2, 5, 7];
        let ft = enc.forward_text(&mut tape, &ids, &set).unwrap();
        let cached = enc.text_prefix(&ids, 2).unwrap();
        let h = tape.constant(&cached).unwrap();
        let rt = enc.forward_from(&mut tape, Modality::Text, h, 3, &set).unwrap();
        assert_eq!(tape.value(ft), tape.value(rt));
    }

    #[test]
    fn missing_prompt_layer_is_a_config_error() {
        let cfg = small();
        let enc = FrozenEncoder::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let mut set = PromptSet::new(3);
        let pv = tape.variable(Tensor::zeros(vec![2, 8])).unwrap();
        set.insert(3, Modality::Vision, pv);
        let t = enc.embed_image(&mut tape, &patches(&cfg, 1)).unwrap();
        assert!(matches!(enc.forward_vision(&mut tape, t, &set), Err(Error::Config(_))));
    }

    #[test]
    fn text_rejects_out_of_vocab_ids() {
        let cfg = small();
        let enc = FrozenEncoder::new(cfg).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(enc.forward_text(&mut tape, &[1, 2, 10], &PromptSet::empty()), Err(Error::Input(_))));
    }

    #[test]
    fn distinct_class_names_give_distinct_features() {
        let enc = FrozenEncoder::new(small()).unwrap();
        let a = enc.encode_text(&[1, 2, 3], &PromptValues::empty()).unwrap();
        let b = enc.encode_text(&[3, 2, 1], &PromptValues::empty()).unwrap();
        assert_eq!(a.len(), 5);
        assert_ne!(a, b);
    }

    #[test]
    fn gradients_reach_every_injected_prompt() {
        for causal in [true, false] {
            let cfg = EncoderConfig { causal_text: causal, ..small() };
            let enc = FrozenEncoder::new(cfg.clone()).unwrap();
            let mut tape = Tape::new();
            let set = prompts(&mut tape, &cfg, 2, 2, 11);
            let t = enc.embed_image(&mut tape, &patches(&cfg, 6)).unwrap();
            let fv = enc.forward_vision(&mut tape, t, &set).unwrap();
            let ft = enc.forward_text(&mut tape, &[1, 4, 6], &set).unwrap();
            let prod = tape.mul(fv, ft).unwrap();
            let loss = tape.sum(prod).unwrap();
            let g = tape.backward(loss).unwrap();
            for layer in 2..=cfg.layers {
                for m in Modality::BOTH {
                    let gp = g.get(set.get(layer, m).unwrap()).expect("prompt gradient");
                    let n: f64 = gp.iter().map(|x| x * x).sum();
                    assert!(n > 0.0, "layer {layer} {m} causal={causal}");
                }
            }
        }
    }

    #[test]
    fn classify_examples() {
        let feats = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = classify(&[1.0, 0.0], &feats, 1.0).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let same = Tensor::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
        let p = classify(&[1.0, 2.0], &same, 0.01).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let a = classify(&[0.2, -0.7], &feats, 0.05).unwrap();
        let b = classify(&[2.0, -7.0], &feats, 0.05).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(classify(&[0.0, 0.0], &feats, 1.0).is_err());
        assert!(classify(&[1.0, 0.0], &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 1.0).is_err());
    }
}
