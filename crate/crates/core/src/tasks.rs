//! Synthetic few-shot classification tasks with a base/novel class split.
//!
//! Each class owns a patch-space prototype and a fixed token sequence (its
//! "name"). Prototypes start mutually orthogonal and are then nudged so the
//! frozen, prompt-free encoder already matches each clean prototype to its
//! own name. Novel classes are therefore zero-shot recognizable, which is
//! the capability that adaptation on base classes can erode.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{classify, cosine_scores, FrozenEncoder, PromptValues};
use crate::numcore::{Tape, Tensor};
use crate::Error;

const SHOT_CHOICES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    /// Per-entry Gaussian noise added to a prototype (σ_x).
    pub noise: f64,
    pub seed: u64,
    /// Cosine margin the frozen model must reach on every clean prototype.
    pub align_margin: f64,
    pub align_steps: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { classes: 8, shots: 16, test_per_class: 50, noise: 0.3, seed: 0, align_margin: 0.002, align_steps: 400 }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.classes < 4 || !self.classes.is_multiple_of(2) {
            return Err(Error::Parameter(format!("class count must be even and at least 4, got {}", self.classes)));
        }
        if !SHOT_CHOICES.contains(&self.shots) {
            return Err(Error::Parameter(format!("shots must be one of {SHOT_CHOICES:?}, got {}", self.shots)));
        }
        if self.test_per_class == 0 {
            return Err(Error::Parameter("test_per_class must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Parameter(format!("noise must be finite and nonnegative, got {}", self.noise)));
        }
        if !self.align_margin.is_finite() {
            return Err(Error::Parameter("align_margin must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Global class id.
    pub class: usize,
    pub patches: Arc<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    TestBase,
    TestNovel,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestBase => "test_base",
            Split::TestNovel => "test_novel",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    /// Token ids of each class name, indexed by global class id.
    pub names: Vec<Vec<usize>>,
    pub prototypes: Vec<Tensor>,
    pub train: Vec<Sample>,
    pub test_base: Vec<Sample>,
    pub test_novel: Vec<Sample>,
}

impl SyntheticTask {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::TestBase => &self.test_base,
            Split::TestNovel => &self.test_novel,
        }
    }

    /// Fails if any training sample belongs to a novel class.
    pub fn audit_train_split(&self) -> Result<(), Error> {
        match self.train.iter().find(|s| self.novel.contains(&s.class)) {
            Some(s) => Err(Error::Contract(format!("novel class {} leaked into training data", s.class))),
            None => Ok(()),
        }
    }

    /// Writes one CSV row per sample: split, class, flattened patches, name
    /// token ids.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), Error> {
        let mut w = csv::Writer::from_writer(out);
        let patch_len = self.prototypes.first().map_or(0, Tensor::len);
        let name_len = self.names.first().map_or(0, Vec::len);
        let mut header = vec!["split".to_string(), "class".to_string()];
        header.extend((0..patch_len).map(|i| format!("x{i}")));
        header.extend((0..name_len).map(|i| format!("tok{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for split in [Split::Train, Split::TestBase, Split::TestNovel] {
            for s in self.split(split) {
                let mut rec = vec![split.name().to_string(), s.class.to_string()];
                rec.extend(s.patches.values().iter().map(|v| format!("{v:e}")));
                rec.extend(self.names[s.class].iter().map(usize::to_string));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Seeded, equal-size, disjoint halves of `0..classes` (each sorted).
pub fn split_base_novel(classes: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), Error> {
    if !classes.is_multiple_of(2) {
        return Err(Error::Parameter(format!("class count must be even, got {classes}")));
    }
    let mut ids: Vec<usize> = (0..classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    ids.shuffle(&mut rng);
    let mut base = ids[..classes / 2].to_vec();
    let mut novel = ids[classes / 2..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();
    Ok((base, novel))
}

/// `n` mutually orthogonal vectors of length `dim`, each with norm √dim.
pub fn orthogonal_prototypes<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Result<Vec<Vec<f64>>, Error> {
    if n > dim {
        return Err(Error::Parameter(format!("cannot draw {n} orthogonal prototypes in {dim} dimensions")));
    }
    let scale = (dim as f64).sqrt();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = Tensor::randn(vec![dim], 1.0, rng).into_values();
        // two passes of modified Gram–Schmidt keep orthogonality near roundoff
        for _ in 0..2 {
            for u in &out {
                let proj = dot(&v, u) / (scale * scale);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x *= scale / norm);
            out.push(v);
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smallest `cos(own) − max cos(other)` margin of the frozen model over the
/// clean prototypes.
pub fn alignment_margins(enc: &FrozenEncoder, prototypes: &[Tensor], text: &Tensor) -> Result<Vec<f64>, Error> {
    let empty = PromptValues::empty();
    prototypes
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let f = enc.encode_image(p, &empty)?;
            let s = cosine_scores(&f, text)?;
            let other =
                s.iter().enumerate().filter(|&(k, _)| k != c).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            Ok(s[c] - other)
        })
        .collect()
}

/// Frozen text features of every class name, one row per class.
pub fn name_features(enc: &FrozenEncoder, names: &[Vec<usize>]) -> Result<Tensor, Error> {
    let empty = PromptValues::empty();
    let mut rows = Vec::with_capacity(names.len() * enc.config().embed_dim);
    for name in names {
        rows.extend(enc.encode_text(name, &empty)?);
    }
    Ok(Tensor::matrix(names.len(), enc.config().embed_dim, rows)?)
}

const ALIGN_TEMPERATURE: f64 = 0.02;
const ALIGN_ROUNDS: usize = 6;

/// Normalized-gradient descent of a softmax loss over the class names,
/// moving prototype `c` on its sphere until the frozen model separates it
/// from every other name by `margin`. Returns the margin reached.
fn align_one(
    enc: &FrozenEncoder,
    proto: &mut Tensor,
    c: usize,
    text: &Arc<Tensor>,
    margin: f64,
    steps: usize,
) -> Result<f64, Error> {
    let radius = (proto.len() as f64).sqrt();
    let mut step = 0.05 * radius;
    let empty = crate::encoder::PromptSet::empty();
    let mut best = f64::NEG_INFINITY;
    let mut best_proto = proto.detached();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let x = tape.variable(proto.detached())?;
        let tokens = enc.embed_image_var(&mut tape, x)?;
        let f = enc.forward_vision(&mut tape, tokens, &empty)?;
        let t = tape.constant(text)?;
        let fnorm = tape.row_normalize(f)?;
        let tn = tape.row_normalize(t)?;
        let cos = tape.matmul_t(fnorm, false, tn, true)?;
        let s = tape.value(cos).values();
        let other = s.iter().enumerate().filter(|&(k, _)| k != c).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
        let m = s[c] - other;
        if m > best {
            best = m;
            best_proto = proto.detached();
        } else {
            step *= 0.7;
            *proto = best_proto.detached();
            continue;
        }
        if m >= margin || step < 1e-4 * radius {
            break;
        }
        let logits = tape.scale(cos, 1.0 / ALIGN_TEMPERATURE)?;
        let loss = tape.cross_entropy(logits, &[c])?;
        let g = tape.backward(loss)?;
        let grad = g.get(x).ok_or_else(|| Error::Contract("prototype gradient missing".into()))?;
        let gnorm = dot(grad, grad).sqrt();
        if !(gnorm > 0.0) {
            break;
        }
        let v = proto.values_mut();
        v.iter_mut().zip(grad).for_each(|(p, g)| *p -= step * g / gnorm);
        let n = dot(v, v).sqrt();
        v.iter_mut().for_each(|p| *p *= radius / n);
    }
    *proto = best_proto;
    Ok(best)
}

fn random_name<R: Rng + ?Sized>(len: usize, vocab: usize, taken: &[Vec<usize>], rng: &mut R) -> Vec<usize> {
    loop {
        let name: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        if !taken.contains(&name) {
            return name;
        }
    }
}

/// Aligns prototypes to names, redrawing the name of any class whose
/// prototype cannot reach the margin. Gives up quietly after a few rounds;
/// the caller can inspect [`alignment_margins`].
fn align_task<R: Rng + ?Sized>(
    enc: &FrozenEncoder,
    prototypes: &mut [Tensor],
    names: &mut [Vec<usize>],
    margin: f64,
    steps: usize,
    rng: &mut R,
) -> Result<(), Error> {
    let ec = enc.config();
    for round in 0..ALIGN_ROUNDS {
        let text = name_features(enc, names)?;
        let margins = alignment_margins(enc, prototypes, &text)?;
        if margins.iter().all(|&m| m >= margin) {
            return Ok(());
        }
        let text = Arc::new(text);
        let mut failed = Vec::new();
        for c in 0..prototypes.len() {
            if margins[c] < margin && align_one(enc, &mut prototypes[c], c, &text, margin, steps)? < margin {
                failed.push(c);
            }
        }
        if round + 1 < ALIGN_ROUNDS {
            for c in failed {
                names[c] = random_name(ec.text_len, ec.vocab, names, rng);
            }
        }
    }
    Ok(())
}

/// Builds a task whose class names and prototypes are tied to `enc`.
pub fn generate_task(cfg: &TaskConfig, enc: &FrozenEncoder) -> Result<SyntheticTask, Error> {
    cfg.validate()?;
    let ec = enc.config();
    let (base, novel) = split_base_novel(cfg.classes, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut names: Vec<Vec<usize>> = Vec::with_capacity(cfg.classes);
    while names.len() < cfg.classes {
        let name = random_name(ec.text_len, ec.vocab, &names, &mut rng);
        names.push(name);
    }
    let dim = ec.patches * ec.patch_dim;
    let mut prototypes = orthogonal_prototypes(cfg.classes, dim, &mut rng)?
        .into_iter()
        .map(|v| Tensor::matrix(ec.patches, ec.patch_dim, v))
        .collect::<Result<Vec<_>, _>>()?;
    align_task(enc, &mut prototypes, &mut names, cfg.align_margin, cfg.align_steps, &mut rng)?;

    let noisy = |class: usize, rng: &mut ChaCha8Rng| -> Result<Sample, Error> {
        let mut p = prototypes[class].detached();
        if cfg.noise > 0.0 {
            let n = Tensor::randn(vec![dim], cfg.noise, rng);
            p.values_mut().iter_mut().zip(n.values()).for_each(|(x, e)| *x += e);
        }
        Ok(Sample { class, patches: Arc::new(p) })
    };
    let mut train = Vec::with_capacity(base.len() * cfg.shots);
    for &c in &base {
        for _ in 0..cfg.shots {
            train.push(noisy(c, &mut rng)?);
        }
    }
    let mut test_base = Vec::with_capacity(base.len() * cfg.test_per_class);
    for &c in &base {
        for _ in 0..cfg.test_per_class {
            test_base.push(noisy(c, &mut rng)?);
        }
    }
    let mut test_novel = Vec::with_capacity(novel.len() * cfg.test_per_class);
    for &c in &novel {
        for _ in 0..cfg.test_per_class {
            test_novel.push(noisy(c, &mut rng)?);
        }
    }
    let task = SyntheticTask { config: cfg.clone(), base, novel, names, prototypes, train, test_base, test_novel };
    task.audit_train_split()?;
    Ok(task)
}

/// Top-1 accuracy and per-class accuracy (indexed like `candidates`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

/// Classifies every sample against `class_feats`, whose rows correspond to
/// `candidates` (global class ids). `features` maps a sample to its image
/// feature.
pub fn evaluate<F>(
    mut features: F,
    samples: &[Sample],
    candidates: &[usize],
    class_feats: &Tensor,
    tau: f64,
) -> Result<Accuracy, Error>
where
    F: FnMut(&Sample) -> Result<Vec<f64>, Error>,
{
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    if class_feats.rows() != candidates.len() {
        return Err(Error::Input(format!("{} class features for {} candidates", class_feats.rows(), candidates.len())));
    }
    let mut hits = vec![0usize; candidates.len()];
    let mut seen = vec![0usize; candidates.len()];
    for s in samples {
        let Some(target) = candidates.iter().position(|&c| c == s.class) else {
            return Err(Error::Input(format!("sample class {} is not a candidate", s.class)));
        };
        let f = features(s)?;
        let p = classify(&f, class_feats, tau)?;
        let pred = argmax(&p);
        seen[target] += 1;
        if pred == target {
            hits[target] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let per_class = hits.iter().zip(&seen).map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 }).collect();
    Ok(Accuracy { accuracy: correct as f64 / samples.len() as f64, per_class })
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc }).0
}

/// `2ab / (a + b)`, or 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else if a == b {
        a
    } else {
        2.0 * a * b / (a + b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    /// Accuracy per global class id.
    pub per_class: Vec<f64>,
}

impl EvalResult {
    pub fn new(task: &SyntheticTask, base: &Accuracy, novel: &Accuracy) -> Self {
        let mut per_class = vec![0.0; task.config.classes];
        for (i, &c) in task.base.iter().enumerate() {
            per_class[c] = base.per_class[i];
        }
        for (i, &c) in task.novel.iter().enumerate() {
            per_class[c] = novel.per_class[i];
        }
        Self {
            base_acc: base.accuracy,
            novel_acc: novel.accuracy,
            hm: harmonic_mean(base.accuracy, novel.accuracy),
            per_class,
        }
    }
}

/// Mean of per-task HMs (not the HM of mean accuracies).
pub fn average_hm(results: &[EvalResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| r.hm).sum::<f64>() / results.len() as f64
}

/// Zero-shot evaluation with the frozen, prompt-free encoder.
pub fn zero_shot(enc: &FrozenEncoder, task: &SyntheticTask, tau: f64) -> Result<EvalResult, Error> {
    let empty = PromptValues::empty();
    let feats = |ids: &[usize]| -> Result<Tensor, Error> {
        let mut rows = Vec::new();
        for &c in ids {
            rows.extend(enc.encode_text(&task.names[c], &empty)?);
        }
        Ok(Tensor::matrix(ids.len(), enc.config().embed_dim, rows)?)
    };
    let image = |s: &Sample| enc.encode_image(&s.patches, &empty);
    let base = evaluate(image, &task.test_base, &task.base, &feats(&task.base)?, tau)?;
    let novel = evaluate(image, &task.test_novel, &task.novel, &feats(&task.novel)?, tau)?;
    Ok(EvalResult::new(task, &base, &novel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn encoder() -> FrozenEncoder {
        FrozenEncoder::new(EncoderConfig::default()).unwrap()
    }

    #[test]
    fn split_examples() {
        for c in [4, 8, 12] {
            let (b, n) = split_base_novel(c, 3).unwrap();
            assert_eq!(b.len(), c / 2);
            assert_eq!(n.len(), c / 2);
            let mut all: Vec<usize> = b.iter().chain(&n).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..c).collect::<Vec<_>>());
        }
        assert!(split_base_novel(7, 0).is_err());
        assert_eq!(split_base_novel(8, 5).unwrap(), split_base_novel(8, 5).unwrap());
    }

    #[test]
    fn prototypes_are_orthogonal_with_fixed_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = orthogonal_prototypes(8, 50, &mut rng).unwrap();
        for i in 0..8 {
            assert!((dot(&p[i], &p[i]) - 50.0).abs() < 1e-9);
            for j in 0..i {
                assert!(dot(&p[i], &p[j]).abs() < 1e-9);
            }
        }
        assert!(orthogonal_prototypes(5, 4, &mut rng).is_err());
    }

    #[test]
    fn counting_and_determinism() {
        let enc = encoder();
        let cfg = TaskConfig { test_per_class: 3, ..Default::default() };
        let task = generate_task(&cfg, &enc).unwrap();
        assert_eq!(task.train.len(), 64);
        assert_eq!(task.test_base.len(), 12);
        assert_eq!(task.test_novel.len(), 12);
        let again = generate_task(&cfg, &enc).unwrap();
        for (a, b) in task.train.iter().zip(&again.train) {
            assert_eq!(a.class, b.class);
            assert_eq!(a.patches, b.patches);
        }
        task.audit_train_split().unwrap();
        assert!(task.train.iter().all(|s| task.base.contains(&s.class)));
    }

    #[test]
    fn odd_classes_and_bad_shots_rejected() {
        let enc = encoder();
        for cfg in [TaskConfig { classes: 7, ..Default::default() }, TaskConfig { shots: 3, ..Default::default() }] {
            assert!(matches!(generate_task(&cfg, &enc), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn zero_noise_gives_identical_samples_and_perfect_zero_shot() {
        let enc = encoder();
        let cfg = TaskConfig { noise: 0.0, test_per_class: 2, ..Default::default() };
        let task = generate_task(&cfg, &enc).unwrap();
        for w in task.train.windows(2) {
            if w[0].class == w[1].class {
                assert_eq!(w[0].patches, w[1].patches);
            }
        }
        let text = name_features(&enc, &task.names).unwrap();
        let margins = alignment_margins(&enc, &task.prototypes, &text).unwrap();
        assert!(margins.iter().all(|&m| m > 0.0), "{margins:?}");
        let r = zero_shot(&enc, &task, 0.01).unwrap();
        assert_eq!((r.base_acc, r.novel_acc), (1.0, 1.0));
    }

    #[test]
    fn evaluate_oracle_and_constant() {
        let samples: Vec<Sample> =
            (0..8).map(|i| Sample { class: i % 4, patches: Arc::new(Tensor::zeros(vec![1, 1])) }).collect();
        let feats = Tensor::identity(4);
        let oracle = evaluate(
            |s| Ok((0..4).map(|k| if k == s.class { 1.0 } else { 0.0 }).collect()),
            &samples,
            &[0, 1, 2, 3],
            &feats,
            0.01,
        )
        .unwrap();
        assert_eq!(oracle.accuracy, 1.0);
        let constant = evaluate(|_| Ok(vec![0.0, 0.0, 1.0, 0.0]), &samples, &[0, 1, 2, 3], &feats, 0.01).unwrap();
        assert_eq!(constant.accuracy, 0.25);
        assert!(evaluate(|_| Ok(vec![1.0; 4]), &[], &[0, 1, 2, 3], &feats, 0.01).is_err());
    }

    #[test]
    fn harmonic_mean_examples() {
        let hm = harmonic_mean(0.7698, 0.7180);
        assert!((hm * 100.0 - 74.29).abs() <= 0.02);
        assert_eq!(harmonic_mean(0.4, 0.4), 0.4);
        assert!((harmonic_mean(0.8, 0.7) - 0.746667).abs() < 1e-6);
        assert_eq!(harmonic_mean(0.0, 0.9), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let enc = encoder();
        let cfg = TaskConfig { test_per_class: 1, shots: 1, ..Default::default() };
        let task = generate_task(&cfg, &enc).unwrap();
        let mut buf = Vec::new();
        task.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 + 4 + 4);
        assert!(text.lines().nth(1).unwrap().starts_with("train,"));
    }
}
