//! Hierarchical contrastive objectives over effective views.
//!
//! * [`nt_xent_pair`]: symmetric NT-Xent between two row-aligned sets.
//! * [`fncl_loss`]: cross-modal alignment, the sum of NT-Xent over the four
//!   (original | augmented) x (original | augmented) modality pairings.
//! * [`cccl_modality`] / [`cccl_loss`]: within-modality supervised contrast
//!   whose positives are the anchor's augmented view plus every same-label
//!   original view in the batch.
//! * [`contrast_loss`]: `alpha * fncl + (1 - alpha) * cccl`.
//!
//! Similarities are cosine similarities divided by the temperature `tau`.
//! All reductions go through log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::dataio::Label;
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::promptattn::ViewPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub alpha: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig { tau: 0.07, alpha: 0.5 }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Argument(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Argument(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Views of both modalities for one batch, with every slot filled.
#[derive(Clone, Copy, Debug)]
pub struct EffectiveViews<'a> {
    pub m1: ViewPair,
    pub m2: ViewPair,
    pub labels: &'a [Label],
}

fn batch_rows(tape: &Tape, v: Var, op: &'static str) -> Result<usize> {
    let sh = tape.value(v).shape();
    if sh.len() != 2 {
        return Err(Error::dim(op, sh, &[0, 0]));
    }
    if sh[0] == 0 {
        return Err(Error::Argument(format!("{op}: batch must contain at least one instance")));
    }
    Ok(sh[0])
}

/// Cosine-similarity logits `sim(a_i, b_j) / tau` from pre-normalized rows.
fn sim_logits(tape: &mut Tape, na: Var, nb: Var, tau: f64) -> Result<Var> {
    let s = tape.matmul_t(na, nb)?;
    Ok(tape.scale(s, 1.0 / tau))
}

/// Symmetric NT-Xent between row-aligned `x` and `y` (`B x d`):
/// `(1/2B) sum_i [ -log softmax_j(sim(x_i, y_j)/tau)[i] - log softmax_j(sim(y_i, x_j)/tau)[i] ]`.
pub fn nt_xent_pair(tape: &mut Tape, x: Var, y: Var, tau: f64) -> Result<Var> {
    let b = batch_rows(tape, x, "nt_xent_pair")?;
    if tape.value(x).shape() != tape.value(y).shape() {
        return Err(Error::dim("nt_xent_pair", tape.value(x).shape(), tape.value(y).shape()));
    }
    let nx = tape.normalize_rows(x)?;
    let ny = tape.normalize_rows(y)?;
    let diag = Tensor::identity(b);
    let mut terms = Vec::with_capacity(2);
    for (p, q) in [(nx, ny), (ny, nx)] {
        let s = sim_logits(tape, p, q, tau)?;
        let all = tape.logsumexp_rows(s, None)?;
        let pos = tape.logsumexp_rows(s, Some(&diag))?;
        let nll = tape.sub(all, pos)?;
        terms.push(tape.sum(nll));
    }
    let total = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(total, 1.0 / (2.0 * b as f64)))
}

/// Cross-modal alignment over the four view pairings.
pub fn fncl_loss(tape: &mut Tape, views: &EffectiveViews<'_>, cfg: &ContrastConfig) -> Result<Var> {
    let (a, b) = (views.m1, views.m2);
    let pairs = [(a.orig, b.orig), (a.orig, b.aug), (a.aug, b.orig), (a.aug, b.aug)];
    let mut acc: Option<Var> = None;
    for (x, y) in pairs {
        let l = nt_xent_pair(tape, x, y, cfg.tau)?;
        acc = Some(match acc {
            None => l,
            Some(s) => tape.add(s, l)?,
        });
    }
    Ok(acc.expect("four terms"))
}

/// Positive and candidate masks over the `2B` columns `[originals; augmented]`
/// for the `B` original-view anchors.
pub fn cccl_masks<L: PartialEq>(labels: &[L]) -> (Tensor, Tensor) {
    let b = labels.len();
    let mut pos = Tensor::zeros(&[b, 2 * b]);
    let mut cand = Tensor::full(&[b, 2 * b], 1.0);
    for i in 0..b {
        cand.set(i, i, 0.0);
        pos.set(i, b + i, 1.0);
        for j in 0..b {
            if j != i && labels[j] == labels[i] {
                pos.set(i, j, 1.0);
            }
        }
    }
    (pos, cand)
}

/// Within-modality supervised contrast,
/// `-(1/2B) sum_i log( sum_{j in P(i)} e^{s_ij} / sum_{k in K(i)} e^{s_ik} )`,
/// with anchors the original views, `P(i)` the augmented view of `i` plus the
/// same-label originals `j != i`, and `K(i)` all `2B - 1` other views.
pub fn cccl_modality<L: PartialEq>(tape: &mut Tape, x: Var, x_aug: Var, labels: &[L], tau: f64) -> Result<Var> {
    let b = batch_rows(tape, x, "cccl_modality")?;
    if tape.value(x).shape() != tape.value(x_aug).shape() {
        return Err(Error::dim("cccl_modality", tape.value(x).shape(), tape.value(x_aug).shape()));
    }
    if labels.len() != b {
        return Err(Error::dim("cccl_modality", &[b], &[labels.len()]));
    }
    let nx = tape.normalize_rows(x)?;
    let na = tape.normalize_rows(x_aug)?;
    let all = tape.concat_rows(&[nx, na])?;
    let s = sim_logits(tape, nx, all, tau)?;
    let (pos, cand) = cccl_masks(labels);
    let lse_k = tape.logsumexp_rows(s, Some(&cand))?;
    let lse_p = tape.logsumexp_rows(s, Some(&pos))?;
    let nll = tape.sub(lse_k, lse_p)?;
    let total = tape.sum(nll);
    Ok(tape.scale(total, 1.0 / (2.0 * b as f64)))
}

pub fn cccl_loss(tape: &mut Tape, views: &EffectiveViews<'_>, cfg: &ContrastConfig) -> Result<Var> {
    let l1 = cccl_modality(tape, views.m1.orig, views.m1.aug, views.labels, cfg.tau)?;
    let l2 = cccl_modality(tape, views.m2.orig, views.m2.aug, views.labels, cfg.tau)?;
    tape.add(l1, l2)
}

/// `alpha * fncl + (1 - alpha) * cccl`; a term whose weight is exactly zero
/// is not evaluated.
pub fn contrast_loss(tape: &mut Tape, views: &EffectiveViews<'_>, cfg: &ContrastConfig) -> Result<Var> {
    cfg.validate()?;
    if cfg.alpha == 1.0 {
        return fncl_loss(tape, views, cfg);
    }
    if cfg.alpha == 0.0 {
        return cccl_loss(tape, views, cfg);
    }
    let f = fncl_loss(tape, views, cfg)?;
    let c = cccl_loss(tape, views, cfg)?;
    tape.weighted_sum(&[(f, cfg.alpha), (c, 1.0 - cfg.alpha)])
}

/// Value-level [`nt_xent_pair`].
pub fn nt_xent_value(x: &Tensor, y: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let l = nt_xent_pair(&mut tape, xv, yv, tau)?;
    Ok(tape.scalar(l))
}

/// Value-level [`cccl_modality`].
pub fn cccl_value<L: PartialEq>(x: &Tensor, x_aug: &Tensor, labels: &[L], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (xv, av) = (tape.constant(x.clone()), tape.constant(x_aug.clone()));
    let l = cccl_modality(&mut tape, xv, av, labels, tau)?;
    Ok(tape.scalar(l))
}

/// Plain tensors for the four views of a batch; mostly for tests and tools.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTensors {
    pub m1: (Tensor, Tensor),
    pub m2: (Tensor, Tensor),
}

impl ViewTensors {
    pub fn on_tape<'a>(&self, tape: &mut Tape, labels: &'a [Label]) -> EffectiveViews<'a> {
        EffectiveViews {
            m1: ViewPair {
                orig: tape.constant(self.m1.0.clone()),
                aug: tape.constant(self.m1.1.clone()),
            },
            m2: ViewPair {
                orig: tape.constant(self.m2.0.clone()),
                aug: tape.constant(self.m2.1.clone()),
            },
            labels,
        }
    }
}

/// Value-level losses `(fncl, cccl, contrast)` for plain view tensors.
pub fn loss_values(views: &ViewTensors, labels: &[Label], cfg: &ContrastConfig) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let v = views.on_tape(&mut tape, labels);
    let f = fncl_loss(&mut tape, &v, cfg)?;
    let c = cccl_loss(&mut tape, &v, cfg)?;
    let t = contrast_loss(&mut tape, &v, cfg)?;
    Ok((tape.scalar(f), tape.scalar(c), tape.scalar(t)))
}
