//! Training objectives: motion-weighted MAE, correlation loss, margin triplet
//! loss and their weighted sum.
//!
//! Each loss exists twice: a plain `f64` version on [`PoseVector`]s / slices
//! (reference semantics, used by evaluation and tests) and a differentiable
//! tape version used in training. Tests pin the two together.

use crate::error::{Error, Result};
use crate::pose::PoseVector;
use crate::tensor::{Tensor, Var};

/// Coefficients of the final loss and the MMAE smoothing factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.5,
            alpha3: 0.1,
            epsilon: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let a = [self.alpha1, self.alpha2, self.alpha3];
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) || a.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid(
                "loss weights must be nonnegative with at least one positive",
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::invalid("MMAE epsilon must be nonnegative"));
        }
        Ok(())
    }
}

/// Values of the three loss components for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub mmae: f64,
    pub corr: f64,
    pub triplet: f64,
}

/// `α₁·mmae + α₂·corr + α₃·triplet`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if ![c.mmae, c.corr, c.triplet].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("loss component".into()));
    }
    Ok(w.alpha1 * c.mmae + w.alpha2 * c.corr + w.alpha3 * c.triplet)
}

fn check_lengths(t: usize, p: usize, min: usize, what: &str) -> Result<()> {
    if t != p {
        return Err(Error::invalid(format!("{what}: {t} true vs {p} predicted steps")));
    }
    if t < min {
        return Err(Error::invalid(format!("{what} needs at least {min} steps")));
    }
    Ok(())
}

/// Motion-weighted MAE: `(1/(6T)) Σ_i Σ_k (|θ_i^k| + ε) |θ_i^k − θ̂_i^k|`.
pub fn mmae(truth: &[PoseVector], pred: &[PoseVector], epsilon: f64) -> Result<f64> {
    check_lengths(truth.len(), pred.len(), 1, "mmae")?;
    let mut s = 0.0;
    for (t, p) in truth.iter().zip(pred) {
        for (a, b) in t.to_array().iter().zip(p.to_array()) {
            s += (a.abs() + epsilon) * (a - b).abs();
        }
    }
    Ok(s / (6 * truth.len()) as f64)
}

/// Cosine of two series; zero-norm series are defined to have cosine 0.
fn series_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= f64::MIN_POSITIVE || nb <= f64::MIN_POSITIVE {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn component_series(v: &[PoseVector], k: usize) -> Vec<f64> {
    v.iter().map(|p| p.to_array()[k]).collect()
}

/// `(1/6) Σ_k (1 − cos(θ^k, θ̂^k))`, each cosine over the time series of one component.
/// A component whose true or predicted series is all zeros contributes 1.
pub fn correlation_loss(truth: &[PoseVector], pred: &[PoseVector]) -> Result<f64> {
    check_lengths(truth.len(), pred.len(), 2, "correlation loss")?;
    let s: f64 = (0..6)
        .map(|k| 1.0 - series_cosine(&component_series(truth, k), &component_series(pred, k)))
        .sum();
    Ok(s / 6.0)
}

/// Components (0 = tx … 5 = rz) whose series has zero norm in either input;
/// these fall back to cosine 0 in [`correlation_loss`].
pub fn degenerate_components(truth: &[PoseVector], pred: &[PoseVector]) -> Vec<usize> {
    (0..6)
        .filter(|&k| {
            let z = |v: &[PoseVector]| component_series(v, k).iter().all(|x| *x == 0.0);
            z(truth) || z(pred)
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `max(0, ‖a − p‖ − ‖a − n‖)` on flattened features (zero margin).
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64]) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::invalid("triplet features differ in length"));
    }
    Ok((euclid(anchor, positive) - euclid(anchor, negative)).max(0.0))
}

/// For every anchor step, the step with the highest label cosine (positive) and
/// the lowest (negative), excluding the anchor itself; ties go to the lowest index.
pub fn select_triplets(motions: &[PoseVector]) -> Result<Vec<(usize, usize, usize)>> {
    if motions.len() < 3 {
        return Err(Error::invalid("triplet selection needs at least 3 steps"));
    }
    let labels: Vec<[f64; 6]> = motions.iter().map(PoseVector::to_array).collect();
    let mut out = Vec::with_capacity(labels.len());
    for (a, la) in labels.iter().enumerate() {
        let (mut pos, mut neg) = (None::<(usize, f64)>, None::<(usize, f64)>);
        for (j, lj) in labels.iter().enumerate() {
            if j == a {
                continue;
            }
            let c = series_cosine(la, lj);
            if pos.is_none_or(|(_, best)| c > best) {
                pos = Some((j, c));
            }
            if neg.is_none_or(|(_, worst)| c < worst) {
                neg = Some((j, c));
            }
        }
        out.push((a, pos.expect("≥2 candidates").0, neg.expect("≥2 candidates").0));
    }
    Ok(out)
}

fn motion_rows(v: &[PoseVector]) -> Tensor {
    Tensor::new(vec![v.len(), 6], v.iter().flat_map(|p| p.to_array()).collect())
        .expect("non-empty motion list")
}

/// Constant (T, 6) tensor of motion labels.
pub fn labels_tensor(v: &[PoseVector]) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::invalid("empty motion list"));
    }
    Ok(motion_rows(v))
}

/// Tape MMAE; `truth` and `pred` are (T, 6), `truth` untracked.
pub fn mmae_var<'t>(truth: Var<'t>, pred: Var<'t>, epsilon: f64) -> Result<Var<'t>> {
    let w = truth.value();
    let w = Tensor::new(
        w.shape().to_vec(),
        w.data().iter().map(|v| v.abs() + epsilon).collect(),
    )?;
    let w = truth.tape().constant(w);
    Ok(pred.sub(truth)?.abs().mul(w)?.mean())
}

/// Tape correlation loss on (T, 6) series.
pub fn correlation_loss_var<'t>(truth: Var<'t>, pred: Var<'t>) -> Result<Var<'t>> {
    let s = truth.shape();
    if s.len() != 2 || s[0] < 2 || pred.shape() != s {
        return Err(Error::invalid(format!(
            "correlation loss needs matching (T≥2, 6) series, got {s:?} and {:?}",
            pred.shape()
        )));
    }
    let tape = truth.tape();
    let cos = tape.cosine_similarity(truth.t()?, pred.t()?)?;
    Ok(cos.mean().scale(-1.0).add_scalar(1.0))
}

/// Stabilizer inside the triplet distance square root; keeps the gradient finite
/// when two features coincide. It shifts distances by at most 1e-6.
pub const TRIPLET_DIST_EPS: f64 = 1e-12;

/// Tape triplet loss on (B, D) features, averaged over the B triplets.
pub fn triplet_loss_var<'t>(a: Var<'t>, p: Var<'t>, n: Var<'t>) -> Result<Var<'t>> {
    let s = a.shape();
    if s.len() != 2 || p.shape() != s || n.shape() != s {
        return Err(Error::invalid("triplet features must share a (B, D) shape"));
    }
    let dist = |x: Var<'t>| -> Result<Var<'t>> {
        let d = a.sub(x)?;
        Ok(d.mul(d)?.sum_axis(1, false)?.add_scalar(TRIPLET_DIST_EPS).sqrt())
    };
    Ok(dist(p)?.sub(dist(n)?)?.relu().mean())
}

/// Tape `α₁·mmae + α₂·corr + α₃·triplet`; components with zero weight are skipped.
pub fn total_loss_var<'t>(
    mmae: Var<'t>,
    corr: Option<Var<'t>>,
    triplet: Option<Var<'t>>,
    w: &LossWeights,
) -> Result<Var<'t>> {
    let mut total = mmae.scale(w.alpha1);
    if let (Some(c), true) = (corr, w.alpha2 != 0.0) {
        total = total.add(c.scale(w.alpha2))?;
    }
    if let (Some(t), true) = (triplet, w.alpha3 != 0.0) {
        total = total.add(t.scale(w.alpha3))?;
    }
    Ok(total)
}
