//! Training objectives: temperature-scaled InfoNCE, the covariance-trace
//! regularizer (FGR) and the knowledge-constancy loss (KCL).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// FGR weight (γ).
    pub gamma: f64,
    /// KCL weight (η).
    pub eta: f64,
    /// Softmax temperature (τ).
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 25.0, eta: 0.5, tau: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) || !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got gamma={} eta={}",
                self.gamma, self.eta
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Features of one mini-batch. The frozen features are plain tensors so they
/// can never receive gradients.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub image: Var,
    pub text: Var,
    pub labels: Vec<usize>,
    pub frozen_image: Arc<Tensor>,
    pub frozen_text: Arc<Tensor>,
}

impl FeatureBatch {
    fn check(&self, tape: &Tape) -> Result<usize, Error> {
        let (b, d) = tape.value(self.image).dims2()?;
        let shapes = [tape.value(self.text).dims2()?, self.frozen_image.dims2()?, self.frozen_text.dims2()?];
        if shapes.iter().any(|&s| s != (b, d)) || self.labels.len() != b {
            return Err(Error::Num(NumError::Dimension(format!(
                "feature batch members disagree: image {b}x{d}, others {shapes:?}, {} labels",
                self.labels.len()
            ))));
        }
        Ok(b)
    }
}

/// Term handles on the tape. Disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub nce: Var,
    pub fgr: Option<Var>,
    pub kcl: Option<Var>,
}

/// Scalar values of each term; a disabled term reads exactly 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub nce: f64,
    pub fgr: f64,
    pub kcl: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.scalar(self.total),
            nce: tape.scalar(self.nce),
            fgr: self.fgr.map_or(0.0, |v| tape.scalar(v)),
            kcl: self.kcl.map_or(0.0, |v| tape.scalar(v)),
        }
    }
}

/// Batch-mean cross-entropy over `cos(f_v, class_feats) / τ`.
pub fn info_nce(tape: &mut Tape, image: Var, class_feats: Var, labels: &[usize], tau: f64) -> Result<Var, Error> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let f = tape.row_normalize(image)?;
    let c = tape.row_normalize(class_feats)?;
    let cos = tape.matmul_t(f, false, c, true)?;
    let logits = tape.scale(cos, 1.0 / tau)?;
    Ok(tape.cross_entropy(logits, labels)?)
}

fn covariance(tape: &mut Tape, f: Var) -> Result<Var, Error> {
    let (b, _) = tape.value(f).dims2()?;
    if b < 2 {
        return Err(Error::Num(NumError::DegenerateBatch(b)));
    }
    let mean = tape.mean_rows(f)?;
    let neg = tape.scale(mean, -1.0)?;
    let centered = tape.add_row(f, neg)?;
    let gram = tape.matmul_t(centered, true, centered, false)?;
    Ok(tape.scale(gram, 1.0 / (b as f64 - 1.0))?)
}

/// `½ · tr(cov(F_v) · cov(F_t))` with unbiased batch covariances.
pub fn fgr(tape: &mut Tape, image: Var, text: Var) -> Result<Var, Error> {
    let (bv, dv) = tape.value(image).dims2()?;
    let (bt, dt) = tape.value(text).dims2()?;
    if (bv, dv) != (bt, dt) {
        return Err(Error::Num(NumError::Dimension(format!("fgr batches {bv}x{dv} vs {bt}x{dt}"))));
    }
    let cv = covariance(tape, image)?;
    let ct = covariance(tape, text)?;
    let ctt = tape.transpose(ct)?;
    let prod = tape.mul(cv, ctt)?;
    let tr = tape.sum(prod)?;
    Ok(tape.scale(tr, 0.5)?)
}

/// `½[(1 − cos(f_v, f_v0)) + (1 − cos(f_t, f_t0))]`, averaged over rows.
pub fn kcl(
    tape: &mut Tape,
    image: Var,
    text: Var,
    frozen_image: &Arc<Tensor>,
    frozen_text: &Arc<Tensor>,
) -> Result<Var, Error> {
    let fv0 = tape.constant(frozen_image)?;
    let ft0 = tape.constant(frozen_text)?;
    let mut sides = Vec::with_capacity(2);
    for (f, f0) in [(image, fv0), (text, ft0)] {
        let cos = tape.row_cosine(f, f0)?;
        let mean = tape.mean_rows(cos)?;
        let dist = tape.scale(mean, -1.0)?;
        sides.push(tape.add_const(dist, 1.0)?);
    }
    let both = tape.add(sides[0], sides[1])?;
    Ok(tape.scale(both, 0.5)?)
}

/// `info_nce + γ·fgr + η·kcl`. A zero weight skips its term entirely.
pub fn total(tape: &mut Tape, batch: &FeatureBatch, class_feats: Var, w: &LossWeights) -> Result<LossTerms, Error> {
    w.validate()?;
    batch.check(tape)?;
    let nce = info_nce(tape, batch.image, class_feats, &batch.labels, w.tau)?;
    let mut sum = nce;
    let fgr_term = if w.gamma > 0.0 {
        let v = fgr(tape, batch.image, batch.text)?;
        let s = tape.scale(v, w.gamma)?;
        sum = tape.add(sum, s)?;
        Some(v)
    } else {
        None
    };
    let kcl_term = if w.eta > 0.0 {
        let v = kcl(tape, batch.image, batch.text, &batch.frozen_image, &batch.frozen_text)?;
        let s = tape.scale(v, w.eta)?;
        sum = tape.add(sum, s)?;
        Some(v)
    } else {
        None
    };
    Ok(LossTerms { total: sum, nce, fgr: fgr_term, kcl: kcl_term })
}

/// Stacks `feats[labels[i]]` into a B×d matrix on the tape.
pub fn gather_rows(tape: &mut Tape, feats: Var, labels: &[usize]) -> Result<Var, Error> {
    let (c, _) = tape.value(feats).dims2()?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Num(NumError::Label { label: bad, classes: c }));
    }
    let rows = labels.iter().map(|&y| tape.slice_rows(feats, y, 1)).collect::<Result<Vec<_>, _>>()?;
    Ok(tape.concat_rows(&rows)?)
}
