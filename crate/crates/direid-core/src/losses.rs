//! Loss kernels, composed on the tape so every term is differentiable.
//!
//! Distance-style terms are element-means (not sums), which keeps the
//! default weights meaningful across geometries. The adversarial terms use
//! the numerically stable softplus form of logistic cross-entropy with the
//! non-saturating generator objective. Each kernel is pure: it appends to
//! the tape and returns the scalar node.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Weights for every composed objective, plus the two margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_invc: f64,
    pub lambda_recon: f64,
    pub lambda_pre: f64,
    pub lambda_real: f64,
    pub lambda_deg: f64,
    pub lambda_id: f64,
    pub lambda_inv: f64,
    pub lambda_sen: f64,
    pub lambda_both: f64,
    /// Margin of the degradation ranking hinge.
    pub epsilon_margin: f64,
    /// Margin of the batch-hard triplet hinge.
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_invc: 1.0,
            lambda_recon: 10.0,
            lambda_pre: 1.0,
            lambda_real: 1.0,
            lambda_deg: 1.0,
            lambda_id: 1.0,
            lambda_inv: 1.0,
            lambda_sen: 1.0,
            lambda_both: 1.0,
            epsilon_margin: 0.5,
            triplet_margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_invc", self.lambda_invc),
            ("lambda_recon", self.lambda_recon),
            ("lambda_pre", self.lambda_pre),
            ("lambda_real", self.lambda_real),
            ("lambda_deg", self.lambda_deg),
            ("lambda_id", self.lambda_id),
            ("lambda_inv", self.lambda_inv),
            ("lambda_sen", self.lambda_sen),
            ("lambda_both", self.lambda_both),
        ];
        for (name, value) in lambdas {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be a finite non-negative number, got {value}"
                )));
            }
        }
        if !(self.epsilon_margin.is_finite() && self.epsilon_margin > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_margin must be positive, got {}",
                self.epsilon_margin
            )));
        }
        if !(self.triplet_margin.is_finite() && self.triplet_margin > 0.0) {
            return Err(Error::Config(format!(
                "triplet_margin must be positive, got {}",
                self.triplet_margin
            )));
        }
        Ok(())
    }
}

/// Ranking direction γ for the degradation hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankLabel {
    /// γ = +1: the anchor should score lower (be less degraded).
    Plus,
    /// γ = −1: the anchor should score higher.
    Minus,
}

impl RankLabel {
    pub fn value(self) -> f64 {
        match self {
            RankLabel::Plus => 1.0,
            RankLabel::Minus => -1.0,
        }
    }
}

/// Which side of the adversarial game a loss is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialSide {
    Discriminator,
    Generator,
}

fn check_same_shape(t: &Tape, a: Var, b: Var, context: &'static str) -> Result<()> {
    let sa = t.value(a).shape();
    let sb = t.value(b).shape();
    if sa != sb {
        return Err(Error::shape(
            context,
            format!("{sa:?}"),
            format!("{sb:?}"),
        ));
    }
    Ok(())
}

fn mean_abs_diff(t: &mut Tape, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let d = t.abs(d);
    t.mean_all(d)
}

/// Mean |a − b| over two content maps — the pull that makes content
/// features degradation-invariant.
pub fn invariable_content_loss(t: &mut Tape, map_a: Var, map_b: Var) -> Result<Var> {
    check_same_shape(t, map_a, map_b, "invariable content loss")?;
    Ok(mean_abs_diff(t, map_a, map_b))
}

/// Mean absolute pixel difference. In the self phase the targets are
/// x_ii → x_i and x_ji → x_i (never the synthetically degraded
/// reconstructions); in the cross phase x_ii → x_i and x_kk → x_k.
pub fn reconstruction_loss(t: &mut Tape, generated: Var, target: Var) -> Result<Var> {
    check_same_shape(t, generated, target, "reconstruction loss")?;
    Ok(mean_abs_diff(t, generated, target))
}

/// Mean |emb_gen − emb_ref| between identity embeddings of a generated
/// image and its source.
pub fn identity_preserving_loss(t: &mut Tape, emb_gen: Var, emb_ref: Var) -> Result<Var> {
    check_same_shape(t, emb_gen, emb_ref, "identity preserving loss")?;
    Ok(mean_abs_diff(t, emb_gen, emb_ref))
}

/// Grand mean over every patch in `maps` of softplus(±logit), weighted so
/// each patch counts once regardless of scale.
fn grand_mean_softplus(t: &mut Tape, maps: &[Var], negate: bool) -> Var {
    let counts: Vec<usize> = maps.iter().map(|m| t.value(*m).len()).collect();
    let total: usize = counts.iter().sum();
    let mut acc: Option<Var> = None;
    for (m, count) in maps.iter().zip(&counts) {
        let z = if negate { t.scale(*m, -1.0) } else { *m };
        let sp = t.softplus(z);
        let mean = t.mean_all(sp);
        let weighted = t.scale(mean, *count as f64 / total as f64);
        acc = Some(match acc {
            None => weighted,
            Some(a) => t.add(a, weighted),
        });
    }
    acc.expect("non-empty map list")
}

/// Patch-level GAN loss over multi-scale logit maps.
///
/// Discriminator side: softplus(−real) + softplus(fake), each averaged
/// over all patches of all listed maps (reals from every genuine capture
/// in the phase, fakes from every generated image). Generator side:
/// non-saturating softplus(−fake).
pub fn reality_adversarial_loss(
    t: &mut Tape,
    real_maps: &[Var],
    fake_maps: &[Var],
    side: AdversarialSide,
) -> Result<Var> {
    if fake_maps.is_empty() {
        return Err(Error::Parameter {
            name: "fake_maps",
            reason: "adversarial loss needs at least one fake patch map".into(),
        });
    }
    match side {
        AdversarialSide::Discriminator => {
            if real_maps.is_empty() {
                return Err(Error::Parameter {
                    name: "real_maps",
                    reason: "discriminator loss needs at least one real patch map".into(),
                });
            }
            let real_term = grand_mean_softplus(t, real_maps, true);
            let fake_term = grand_mean_softplus(t, fake_maps, false);
            Ok(t.add(real_term, fake_term))
        }
        AdversarialSide::Generator => Ok(grand_mean_softplus(t, fake_maps, true)),
    }
}

/// Hinge on the difference of degradation scores:
/// `max(0, (anchor − other)·γ + ε)`. Works elementwise, so per-sample
/// score columns average over the batch.
pub fn degradation_ranking_loss(
    t: &mut Tape,
    score_anchor: Var,
    score_other: Var,
    gamma: RankLabel,
    epsilon: f64,
) -> Result<Var> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Parameter {
            name: "epsilon",
            reason: format!("ranking margin must be positive, got {epsilon}"),
        });
    }
    check_same_shape(t, score_anchor, score_other, "degradation ranking loss")?;
    let diff = t.sub(score_anchor, score_other);
    let signed = t.scale(diff, gamma.value());
    let shifted = t.add_const(signed, epsilon);
    let hinged = t.relu(shifted);
    Ok(t.mean_all(hinged))
}

/// Cross-phase rank label: γ = −1 when the anchor already scores higher,
/// γ = +1 when lower. A tie yields `None`: the pair is skipped rather than
/// given an arbitrary direction.
pub fn rank_label_from_scores(score_i: f64, score_k: f64) -> Option<RankLabel> {
    if score_i > score_k {
        Some(RankLabel::Minus)
    } else if score_i < score_k {
        Some(RankLabel::Plus)
    } else {
        None
    }
}

/// Cross-entropy identification loss over identity logits.
pub fn identification_loss(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    t.cross_entropy(logits, labels)
}

/// Batch-hard triplet loss over an `(N, D)` embedding batch.
pub fn triplet_hard_loss(
    t: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    if !(margin.is_finite() && margin > 0.0) {
        return Err(Error::Parameter {
            name: "margin",
            reason: format!("triplet margin must be positive, got {margin}"),
        });
    }
    t.triplet_hard(embeddings, labels, margin)
}

/// Training phase selector for [`total_objective`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SelfDegradation,
    CrossDegradation,
    Dfen,
}

/// Named loss terms offered to [`total_objective`]. Only the terms of the
/// chosen phase may be present.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermSet {
    pub invc: Option<Var>,
    pub recon: Option<Var>,
    pub pre: Option<Var>,
    pub real: Option<Var>,
    pub deg: Option<Var>,
    pub id: Option<Var>,
    pub inv: Option<Var>,
    pub sen: Option<Var>,
    pub both: Option<Var>,
}

/// Weighted sum of a phase's loss terms. Every required term must be
/// present and no foreign term may be: a silent zero or a stray addend
/// would mean some loss was wired to the wrong phase.
pub fn total_objective(t: &mut Tape, phase: Phase, terms: &TermSet, w: &LossWeights) -> Result<Var> {
    let named = [
        ("invc", terms.invc, w.lambda_invc),
        ("recon", terms.recon, w.lambda_recon),
        ("pre", terms.pre, w.lambda_pre),
        ("real", terms.real, w.lambda_real),
        ("deg", terms.deg, w.lambda_deg),
        ("id", terms.id, w.lambda_id),
        ("inv", terms.inv, w.lambda_inv),
        ("sen", terms.sen, w.lambda_sen),
        ("both", terms.both, w.lambda_both),
    ];
    let required: &[&str] = match phase {
        Phase::SelfDegradation => &["invc", "recon", "pre", "real", "deg"],
        Phase::CrossDegradation => &["id", "recon", "pre", "real", "deg"],
        Phase::Dfen => &["inv", "sen", "both"],
    };
    let mut acc: Option<Var> = None;
    for (name, term, lambda) in named {
        let needed = required.contains(&name);
        match (needed, term) {
            (true, Some(v)) => {
                let weighted = t.scale(v, lambda);
                acc = Some(match acc {
                    None => weighted,
                    Some(a) => t.add(a, weighted),
                });
            }
            (true, None) => {
                return Err(Error::State(format!(
                    "{phase:?} objective is missing required term `{name}`"
                )));
            }
            (false, Some(_)) => {
                return Err(Error::State(format!(
                    "{phase:?} objective does not accept term `{name}`"
                )));
            }
            (false, None) => {}
        }
    }
    Ok(acc.expect("every phase requires at least one term"))
}
