//! Stage-1 optimization: the two GAN phases as tape graphs.
//!
//! Each phase runs one discriminator update (reality and degradation
//! discriminators, generated images detached) followed by one
//! generator-side update (content encoder, degradation encoders,
//! decoder) against the freshly updated discriminators. The graph
//! builders are shared between the updates and the pure objective
//! functions used by finite-difference audits.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::autodiff::{Tape, Var};
use crate::degrade::SelfDegradedPair;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{
    degradation_ranking_loss, identification_loss, identity_preserving_loss,
    invariable_content_loss, rank_label_from_scores, reality_adversarial_loss,
    reconstruction_loss, total_objective, AdversarialSide, LossWeights, Phase, RankLabel,
    TermSet,
};
use crate::networks::{ClassifierHead, DegradationSource, Forward, Models};
use crate::params::AdamConfig;

use super::{DegPairAudit, LossBreakdown, RealPair, TrainConfig, TrainStage};

/// Parameters owned by the discriminators.
pub fn discriminator_params(name: &str) -> bool {
    name.starts_with("dr.") || name.starts_with("dd.")
}

/// Parameters the self-phase generator update touches. The
/// self-degradation encoder trains only here.
pub fn self_generator_params(name: &str) -> bool {
    ["ec.", "ed.", "edp.", "g."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Parameters the cross-phase generator update touches, including the
/// throwaway content classifier.
pub fn cross_generator_params(name: &str) -> bool {
    ["ec.", "ed.", "g.", "cls_fc."]
        .iter()
        .any(|p| name.starts_with(p))
}

// ---------------------------------------------------------------------------
// Self-degradation phase
// ---------------------------------------------------------------------------

fn self_inputs(fwd: &mut Forward, pairs: &[SelfDegradedPair]) -> Result<(Var, Var)> {
    if pairs.is_empty() {
        return Err(Error::Sampler(
            "self phase needs at least one degraded pair".into(),
        ));
    }
    let xi_refs: Vec<&ImageTensor> = pairs.iter().map(|p| &p.x_i).collect();
    let xj_refs: Vec<&ImageTensor> = pairs.iter().map(|p| &p.x_j).collect();
    Ok((fwd.input(&xi_refs)?, fwd.input(&xj_refs)?))
}

/// Generator-side self-phase objective: the five weighted terms.
fn self_generator_graph(
    fwd: &mut Forward,
    pairs: &[SelfDegradedPair],
    w: &LossWeights,
) -> Result<(TermSet, Var)> {
    let (xi, xj) = self_inputs(fwd, pairs)?;
    let c_i = fwd.encode_content(xi);
    let c_j = fwd.encode_content(xj);
    // The synthetically degraded image routes through the
    // self-degradation encoder; the clean image through the real one.
    let d_i = fwd.encode_degradation(xi, DegradationSource::RealEncoder);
    let d_j = fwd.encode_degradation(xj, DegradationSource::SelfEncoder);
    let x_ii = fwd.decode(c_i.map, d_i);
    let x_ij = fwd.decode(c_i.map, d_j);
    let x_jj = fwd.decode(c_j.map, d_j);
    let x_ji = fwd.decode(c_j.map, d_i);

    let invc = invariable_content_loss(fwd.tape, c_i.map, c_j.map)?;

    // Both reconstructions target the clean image; the recombinations
    // through the self-degradation code are exempt.
    let r1 = reconstruction_loss(fwd.tape, x_ii, xi)?;
    let r2 = reconstruction_loss(fwd.tape, x_ji, xi)?;
    let recon = fwd.tape.add(r1, r2);

    let e_i = fwd.identity_embedding(xi);
    let e_j = fwd.identity_embedding(xj);
    let e_ij = fwd.identity_embedding(x_ij);
    let e_ji = fwd.identity_embedding(x_ji);
    let p1 = identity_preserving_loss(fwd.tape, e_ij, e_i)?;
    let p2 = identity_preserving_loss(fwd.tape, e_ji, e_j)?;
    let pre = fwd.tape.add(p1, p2);

    let mut fake_maps = fwd.discriminate_reality(x_ij);
    fake_maps.extend(fwd.discriminate_reality(x_jj));
    let real = reality_adversarial_loss(fwd.tape, &[], &fake_maps, AdversarialSide::Generator)?;

    let s_i = fwd.degradation_forward(xi).score;
    let s_ij = fwd.degradation_forward(x_ij).score;
    let s_ji = fwd.degradation_forward(x_ji).score;
    let s_j = fwd.degradation_forward(xj).score;
    let d1 = degradation_ranking_loss(fwd.tape, s_i, s_ij, RankLabel::Plus, w.epsilon_margin)?;
    let d2 = degradation_ranking_loss(fwd.tape, s_ji, s_j, RankLabel::Plus, w.epsilon_margin)?;
    let deg = fwd.tape.add(d1, d2);

    let terms = TermSet {
        invc: Some(invc),
        recon: Some(recon),
        pre: Some(pre),
        real: Some(real),
        deg: Some(deg),
        ..TermSet::default()
    };
    let total = total_objective(fwd.tape, Phase::SelfDegradation, &terms, w)?;
    Ok((terms, total))
}

/// Discriminator-side self-phase objective. Generated images enter as
/// detached constants: only the discriminators learn here.
fn self_discriminator_graph(
    fwd: &mut Forward,
    pairs: &[SelfDegradedPair],
    aux_reals: &[&ImageTensor],
    w: &LossWeights,
) -> Result<Var> {
    let (xi, xj) = self_inputs(fwd, pairs)?;
    let c_i = fwd.encode_content(xi);
    let c_j = fwd.encode_content(xj);
    let d_i = fwd.encode_degradation(xi, DegradationSource::RealEncoder);
    let d_j = fwd.encode_degradation(xj, DegradationSource::SelfEncoder);
    let x_ij = fwd.decode(c_i.map, d_j);
    let x_jj = fwd.decode(c_j.map, d_j);
    let x_ji = fwd.decode(c_j.map, d_i);
    let x_ij = fwd.tape.detach(x_ij);
    let x_jj = fwd.tape.detach(x_jj);
    let x_ji = fwd.tape.detach(x_ji);

    let mut real_maps = fwd.discriminate_reality(xi);
    if !aux_reals.is_empty() {
        let xk = fwd.input(aux_reals)?;
        real_maps.extend(fwd.discriminate_reality(xk));
    }
    let mut fake_maps = fwd.discriminate_reality(x_ij);
    fake_maps.extend(fwd.discriminate_reality(x_jj));
    let adv = reality_adversarial_loss(
        fwd.tape,
        &real_maps,
        &fake_maps,
        AdversarialSide::Discriminator,
    )?;

    let s_i = fwd.degradation_forward(xi).score;
    let s_ij = fwd.degradation_forward(x_ij).score;
    let s_ji = fwd.degradation_forward(x_ji).score;
    let s_j = fwd.degradation_forward(xj).score;
    let d1 = degradation_ranking_loss(fwd.tape, s_i, s_ij, RankLabel::Plus, w.epsilon_margin)?;
    let d2 = degradation_ranking_loss(fwd.tape, s_ji, s_j, RankLabel::Plus, w.epsilon_margin)?;
    let deg = fwd.tape.add(d1, d2);

    let adv_w = fwd.tape.scale(adv, w.lambda_real);
    let deg_w = fwd.tape.scale(deg, w.lambda_deg);
    Ok(fwd.tape.add(adv_w, deg_w))
}

// ---------------------------------------------------------------------------
// Cross-degradation phase
// ---------------------------------------------------------------------------

/// Replaces the decoder with test doubles for contract checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DecoderDouble {
    /// Use the real decoder.
    None,
    /// Every recombination is its content-source image verbatim.
    ContentSource,
}

struct CrossScores {
    s_i: Var,
    s_k: Var,
    s_ik: Var,
    s_ki: Var,
}

/// Per-pair ranking term with labels derived from the current scores.
/// Returns the mean over non-tied pairs of the two-term ranking sum,
/// along with the skip count and the audit trail.
fn cross_ranking(
    fwd: &mut Forward,
    scores: &CrossScores,
    epsilon: f64,
) -> Result<(Var, usize, Vec<DegPairAudit>)> {
    let s_i_vals = score_column(fwd, scores.s_i);
    let s_k_vals = score_column(fwd, scores.s_k);
    let mut audit = Vec::with_capacity(s_i_vals.len());
    let mut valid: Vec<(usize, RankLabel)> = Vec::new();
    for r in 0..s_i_vals.len() {
        let label = rank_label_from_scores(s_i_vals[r], s_k_vals[r]);
        audit.push(DegPairAudit {
            score_i: s_i_vals[r],
            score_k: s_k_vals[r],
            gamma: match label {
                Some(RankLabel::Plus) => 1,
                Some(RankLabel::Minus) => -1,
                None => 0,
            },
        });
        if let Some(g) = label {
            valid.push((r, g));
        }
    }
    let skipped = audit.len() - valid.len();
    if valid.is_empty() {
        return Ok((fwd.tape.scalar(0.0), skipped, audit));
    }
    let mut acc: Option<Var> = None;
    for &(r, gamma) in &valid {
        let a1 = fwd.tape.narrow0(scores.s_i, r, 1);
        let o1 = fwd.tape.narrow0(scores.s_ik, r, 1);
        let t1 = degradation_ranking_loss(fwd.tape, a1, o1, gamma, epsilon)?;
        let a2 = fwd.tape.narrow0(scores.s_ki, r, 1);
        let o2 = fwd.tape.narrow0(scores.s_k, r, 1);
        let t2 = degradation_ranking_loss(fwd.tape, a2, o2, gamma, epsilon)?;
        let pair_sum = fwd.tape.add(t1, t2);
        acc = Some(match acc {
            None => pair_sum,
            Some(a) => fwd.tape.add(a, pair_sum),
        });
    }
    let mean = fwd.tape.scale(acc.expect("non-empty"), 1.0 / valid.len() as f64);
    Ok((mean, skipped, audit))
}

fn score_column(fwd: &Forward, v: Var) -> Vec<f64> {
    fwd.tape.value(v).iter().copied().collect()
}

fn cross_inputs(fwd: &mut Forward, pairs: &[RealPair]) -> Result<(Var, Var)> {
    if pairs.is_empty() {
        return Err(Error::Sampler(
            "cross phase needs at least one real pair".into(),
        ));
    }
    let xi_refs: Vec<&ImageTensor> = pairs.iter().map(|p| &p.x_i).collect();
    let xk_refs: Vec<&ImageTensor> = pairs.iter().map(|p| &p.x_k).collect();
    Ok((fwd.input(&xi_refs)?, fwd.input(&xk_refs)?))
}

/// Generator-side cross-phase objective: identification replaces the
/// content-invariance term; rank labels come from comparing the two real
/// images' degradation scores, treated as fixed.
fn cross_generator_graph(
    fwd: &mut Forward,
    pairs: &[RealPair],
    w: &LossWeights,
    double: DecoderDouble,
) -> Result<(TermSet, Var, usize, Vec<DegPairAudit>)> {
    let (xi, xk) = cross_inputs(fwd, pairs)?;
    let c_i = fwd.encode_content(xi);
    let c_k = fwd.encode_content(xk);
    // Both real images route through the real-degradation encoder.
    let d_i = fwd.encode_degradation(xi, DegradationSource::RealEncoder);
    let d_k = fwd.encode_degradation(xk, DegradationSource::RealEncoder);
    let (x_ii, x_kk, x_ik, x_ki) = match double {
        DecoderDouble::None => (
            fwd.decode(c_i.map, d_i),
            fwd.decode(c_k.map, d_k),
            fwd.decode(c_i.map, d_k),
            fwd.decode(c_k.map, d_i),
        ),
        DecoderDouble::ContentSource => (xi, xk, xi, xk),
    };

    let labels_i: Vec<usize> = pairs.iter().map(|p| p.y_i as usize).collect();
    let labels_k: Vec<usize> = pairs.iter().map(|p| p.y_k as usize).collect();
    let logits_i = fwd.classifier_logits(c_i.pooled, ClassifierHead::ContentStage1);
    let logits_k = fwd.classifier_logits(c_k.pooled, ClassifierHead::ContentStage1);
    let ce_i = identification_loss(fwd.tape, logits_i, &labels_i)?;
    let ce_k = identification_loss(fwd.tape, logits_k, &labels_k)?;
    let id_sum = fwd.tape.add(ce_i, ce_k);
    let id = fwd.tape.scale(id_sum, 0.5);

    let r1 = reconstruction_loss(fwd.tape, x_ii, xi)?;
    let r2 = reconstruction_loss(fwd.tape, x_kk, xk)?;
    let recon = fwd.tape.add(r1, r2);

    let e_i = fwd.identity_embedding(xi);
    let e_k = fwd.identity_embedding(xk);
    let e_ik = fwd.identity_embedding(x_ik);
    let e_ki = fwd.identity_embedding(x_ki);
    let p1 = identity_preserving_loss(fwd.tape, e_ik, e_i)?;
    let p2 = identity_preserving_loss(fwd.tape, e_ki, e_k)?;
    let pre = fwd.tape.add(p1, p2);

    let mut fake_maps = fwd.discriminate_reality(x_ik);
    fake_maps.extend(fwd.discriminate_reality(x_ki));
    let real = reality_adversarial_loss(fwd.tape, &[], &fake_maps, AdversarialSide::Generator)?;

    let scores = CrossScores {
        s_i: fwd.degradation_forward(xi).score,
        s_k: fwd.degradation_forward(xk).score,
        s_ik: fwd.degradation_forward(x_ik).score,
        s_ki: fwd.degradation_forward(x_ki).score,
    };
    let (deg, skipped, audit) = cross_ranking(fwd, &scores, w.epsilon_margin)?;

    let terms = TermSet {
        id: Some(id),
        recon: Some(recon),
        pre: Some(pre),
        real: Some(real),
        deg: Some(deg),
        ..TermSet::default()
    };
    let total = total_objective(fwd.tape, Phase::CrossDegradation, &terms, w)?;
    Ok((terms, total, skipped, audit))
}

/// Discriminator-side cross-phase objective with detached fakes.
fn cross_discriminator_graph(
    fwd: &mut Forward,
    pairs: &[RealPair],
    w: &LossWeights,
) -> Result<Var> {
    let (xi, xk) = cross_inputs(fwd, pairs)?;
    let c_i = fwd.encode_content(xi);
    let c_k = fwd.encode_content(xk);
    let d_i = fwd.encode_degradation(xi, DegradationSource::RealEncoder);
    let d_k = fwd.encode_degradation(xk, DegradationSource::RealEncoder);
    let x_ik = fwd.decode(c_i.map, d_k);
    let x_ki = fwd.decode(c_k.map, d_i);
    let x_ik = fwd.tape.detach(x_ik);
    let x_ki = fwd.tape.detach(x_ki);

    let mut real_maps = fwd.discriminate_reality(xi);
    real_maps.extend(fwd.discriminate_reality(xk));
    let mut fake_maps = fwd.discriminate_reality(x_ik);
    fake_maps.extend(fwd.discriminate_reality(x_ki));
    let adv = reality_adversarial_loss(
        fwd.tape,
        &real_maps,
        &fake_maps,
        AdversarialSide::Discriminator,
    )?;

    let scores = CrossScores {
        s_i: fwd.degradation_forward(xi).score,
        s_k: fwd.degradation_forward(xk).score,
        s_ik: fwd.degradation_forward(x_ik).score,
        s_ki: fwd.degradation_forward(x_ki).score,
    };
    let (deg, _, _) = cross_ranking(fwd, &scores, w.epsilon_margin)?;

    let adv_w = fwd.tape.scale(adv, w.lambda_real);
    let deg_w = fwd.tape.scale(deg, w.lambda_deg);
    Ok(fwd.tape.add(adv_w, deg_w))
}

// ---------------------------------------------------------------------------
// Pure objectives and gradients
// ---------------------------------------------------------------------------

fn term_values(tape: &Tape, names: &[(&str, Option<Var>)]) -> BTreeMap<String, f64> {
    names
        .iter()
        .map(|&(name, var)| {
            (
                name.to_string(),
                tape.scalar_value(var.expect("term present")),
            )
        })
        .collect()
}

fn self_breakdown(tape: &Tape, terms: &TermSet, total: Var) -> LossBreakdown {
    LossBreakdown {
        terms: term_values(
            tape,
            &[
                ("invc", terms.invc),
                ("recon", terms.recon),
                ("pre", terms.pre),
                ("real", terms.real),
                ("deg", terms.deg),
            ],
        ),
        total: tape.scalar_value(total),
        ..LossBreakdown::default()
    }
}

fn cross_breakdown(
    tape: &Tape,
    terms: &TermSet,
    total: Var,
    skipped: usize,
    audit: Vec<DegPairAudit>,
) -> LossBreakdown {
    LossBreakdown {
        terms: term_values(
            tape,
            &[
                ("id", terms.id),
                ("recon", terms.recon),
                ("pre", terms.pre),
                ("real", terms.real),
                ("deg", terms.deg),
            ],
        ),
        total: tape.scalar_value(total),
        deg_skipped: skipped,
        deg_audit: audit,
    }
}

/// Generator-side self-phase loss values without any update.
pub fn self_generator_objective(
    models: &Models,
    pairs: &[SelfDegradedPair],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, |_| false);
    let (terms, total) = self_generator_graph(&mut fwd, pairs, w)?;
    Ok(self_breakdown(fwd.tape, &terms, total))
}

/// Generator-side self-phase loss and named gradients for the requested
/// parameter set.
pub fn self_generator_gradients(
    models: &Models,
    pairs: &[SelfDegradedPair],
    w: &LossWeights,
    trainable: impl Fn(&str) -> bool,
) -> Result<(LossBreakdown, BTreeMap<String, ArrayD<f64>>)> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, trainable);
    let (terms, total) = self_generator_graph(&mut fwd, pairs, w)?;
    let breakdown = self_breakdown(fwd.tape, &terms, total);
    let grad_list = fwd.tape.backward(total);
    let grads = fwd.gradients(&grad_list);
    Ok((breakdown, grads))
}

/// Discriminator-side self-phase loss value without any update.
pub fn self_discriminator_objective(
    models: &Models,
    pairs: &[SelfDegradedPair],
    aux_reals: &[&ImageTensor],
    w: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, |_| false);
    let total = self_discriminator_graph(&mut fwd, pairs, aux_reals, w)?;
    Ok(fwd.tape.scalar_value(total))
}

/// Discriminator-side self-phase loss and named gradients.
pub fn self_discriminator_gradients(
    models: &Models,
    pairs: &[SelfDegradedPair],
    aux_reals: &[&ImageTensor],
    w: &LossWeights,
    trainable: impl Fn(&str) -> bool,
) -> Result<(f64, BTreeMap<String, ArrayD<f64>>)> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, trainable);
    let total = self_discriminator_graph(&mut fwd, pairs, aux_reals, w)?;
    let value = fwd.tape.scalar_value(total);
    let grad_list = fwd.tape.backward(total);
    let grads = fwd.gradients(&grad_list);
    Ok((value, grads))
}

/// Generator-side cross-phase loss values without any update.
pub fn cross_generator_objective(
    models: &Models,
    pairs: &[RealPair],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, |_| false);
    let (terms, total, skipped, audit) =
        cross_generator_graph(&mut fwd, pairs, w, DecoderDouble::None)?;
    Ok(cross_breakdown(fwd.tape, &terms, total, skipped, audit))
}

/// Contract check hook: evaluates the cross-phase objective with the
/// decoder replaced by a double that returns each recombination's
/// content-source image, which zeroes the reconstruction term exactly.
pub fn cross_generator_objective_with_identity_decoder(
    models: &Models,
    pairs: &[RealPair],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, |_| false);
    let (terms, total, skipped, audit) =
        cross_generator_graph(&mut fwd, pairs, w, DecoderDouble::ContentSource)?;
    Ok(cross_breakdown(fwd.tape, &terms, total, skipped, audit))
}

/// Generator-side cross-phase loss and named gradients.
pub fn cross_generator_gradients(
    models: &Models,
    pairs: &[RealPair],
    w: &LossWeights,
    trainable: impl Fn(&str) -> bool,
) -> Result<(LossBreakdown, BTreeMap<String, ArrayD<f64>>)> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, trainable);
    let (terms, total, skipped, audit) =
        cross_generator_graph(&mut fwd, pairs, w, DecoderDouble::None)?;
    let breakdown = cross_breakdown(fwd.tape, &terms, total, skipped, audit);
    let grad_list = fwd.tape.backward(total);
    let grads = fwd.gradients(&grad_list);
    Ok((breakdown, grads))
}

/// Discriminator-side cross-phase loss value without any update.
pub fn cross_discriminator_objective(
    models: &Models,
    pairs: &[RealPair],
    w: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, |_| false);
    let total = cross_discriminator_graph(&mut fwd, pairs, w)?;
    Ok(fwd.tape.scalar_value(total))
}

/// Discriminator-side cross-phase loss and named gradients.
pub fn cross_discriminator_gradients(
    models: &Models,
    pairs: &[RealPair],
    w: &LossWeights,
    trainable: impl Fn(&str) -> bool,
) -> Result<(f64, BTreeMap<String, ArrayD<f64>>)> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, trainable);
    let total = cross_discriminator_graph(&mut fwd, pairs, w)?;
    let value = fwd.tape.scalar_value(total);
    let grad_list = fwd.tape.backward(total);
    let grads = fwd.gradients(&grad_list);
    Ok((value, grads))
}

// ---------------------------------------------------------------------------
// The trainer
// ---------------------------------------------------------------------------

/// Owns the models through Stage 1 and applies the two half-updates per
/// phase.
pub struct DdganTrainer {
    pub models: Models,
    cfg: TrainConfig,
    adam: AdamConfig,
}

impl DdganTrainer {
    pub fn new(models: Models, cfg: TrainConfig) -> Result<Self> {
        if cfg.stage != TrainStage::Ddgan {
            return Err(Error::Config(format!(
                "DDGAN trainer needs a ddgan configuration, got {:?}",
                cfg.stage
            )));
        }
        cfg.validate()?;
        Ok(DdganTrainer {
            models,
            cfg,
            adam: AdamConfig::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn stage1_lr(&self) -> impl Fn(&str) -> f64 {
        let gan = self.cfg.learning_rates.gan;
        let classifier = self.cfg.learning_rates.classifier;
        move |name: &str| {
            if name.starts_with("cls_fc.") {
                classifier
            } else {
                gan
            }
        }
    }

    /// One self-phase alternation: discriminator update, then generator
    /// update. Returns the generator-side loss report.
    pub fn self_step(
        &mut self,
        pairs: &[SelfDegradedPair],
        aux_reals: &[&ImageTensor],
    ) -> Result<LossBreakdown> {
        let (_, d_grads) = self_discriminator_gradients(
            &self.models,
            pairs,
            aux_reals,
            &self.cfg.weights,
            discriminator_params,
        )?;
        self.models
            .store
            .adam_step(&d_grads, &self.adam, self.stage1_lr())?;

        let (report, g_grads) = self_generator_gradients(
            &self.models,
            pairs,
            &self.cfg.weights,
            self_generator_params,
        )?;
        self.models
            .store
            .adam_step(&g_grads, &self.adam, self.stage1_lr())?;
        Ok(report)
    }

    /// One cross-phase alternation: discriminator update, then generator
    /// update. Returns the generator-side loss report.
    pub fn cross_step(&mut self, pairs: &[RealPair]) -> Result<LossBreakdown> {
        let (_, d_grads) = cross_discriminator_gradients(
            &self.models,
            pairs,
            &self.cfg.weights,
            discriminator_params,
        )?;
        self.models
            .store
            .adam_step(&d_grads, &self.adam, self.stage1_lr())?;

        let (report, g_grads) = cross_generator_gradients(
            &self.models,
            pairs,
            &self.cfg.weights,
            cross_generator_params,
        )?;
        self.models
            .store
            .adam_step(&g_grads, &self.adam, self.stage1_lr())?;
        Ok(report)
    }
}
