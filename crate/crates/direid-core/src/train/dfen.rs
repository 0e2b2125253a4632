//! Stage-2 optimization: the dual-feature identity network.
//!
//! One graph produces the invariant feature (content encoder pooling),
//! the sensitive feature (identity embedding reweighted by the
//! degradation-cue attention), and their fusion. Each stream gets a
//! classification head plus hard-mining triplet supervision, combined
//! under the stream weights. The degradation discriminator only supplies
//! the attention cue and never trains here.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{weighted_sensitive, AttentionMode};
use crate::image::ImageTensor;
use crate::losses::{
    identification_loss, total_objective, triplet_hard_loss, LossWeights, Phase, TermSet,
};
use crate::networks::{ClassifierHead, Forward, Models};
use crate::params::AdamConfig;

use super::{LabeledBatch, LossBreakdown, TrainConfig, TrainStage};

/// Parameters the Stage-2 update touches. The heads always train; the
/// attention block only when it is actually in the graph; the content
/// and identity encoders only when fine-tuning is enabled.
pub fn dfen_trainable(attention: AttentionMode, finetune: bool) -> impl Fn(&str) -> bool + Copy {
    move |name: &str| {
        name.starts_with("cls_inv.")
            || name.starts_with("cls_sen.")
            || name.starts_with("cls_both.")
            || (attention == AttentionMode::Learned && name.starts_with("att."))
            || (finetune && (name.starts_with("ec.") || name.starts_with("eid.")))
    }
}

fn stream_loss(
    fwd: &mut Forward,
    features: Var,
    head: ClassifierHead,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let logits = fwd.classifier_logits(features, head);
    let ce = identification_loss(fwd.tape, logits, labels)?;
    let trip = triplet_hard_loss(fwd.tape, features, labels, margin)?;
    Ok(fwd.tape.add(ce, trip))
}

fn dfen_graph(
    fwd: &mut Forward,
    images: &[&ImageTensor],
    labels: &[usize],
    w: &LossWeights,
    attention: AttentionMode,
) -> Result<(TermSet, Var)> {
    if images.is_empty() {
        return Err(Error::Sampler("identity batch is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Sampler(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let x = fwd.input(images)?;
    let f_inv = fwd.encode_content(x).pooled;
    let emb = fwd.identity_embedding(x);
    let f_sen = weighted_sensitive(fwd, x, emb, attention);
    let fused = fwd.tape.concat_cols(&[f_inv, f_sen]);

    let inv = stream_loss(fwd, f_inv, ClassifierHead::Invariant, labels, w.triplet_margin)?;
    let sen = stream_loss(fwd, f_sen, ClassifierHead::Sensitive, labels, w.triplet_margin)?;
    let both = stream_loss(fwd, fused, ClassifierHead::Fused, labels, w.triplet_margin)?;

    let terms = TermSet {
        inv: Some(inv),
        sen: Some(sen),
        both: Some(both),
        ..TermSet::default()
    };
    let total = total_objective(fwd.tape, Phase::Dfen, &terms, w)?;
    Ok((terms, total))
}

fn dfen_breakdown(tape: &Tape, terms: &TermSet, total: Var) -> LossBreakdown {
    let value = |v: Option<Var>| tape.scalar_value(v.expect("term present"));
    let mut map = BTreeMap::new();
    map.insert("inv".to_string(), value(terms.inv));
    map.insert("sen".to_string(), value(terms.sen));
    map.insert("both".to_string(), value(terms.both));
    LossBreakdown {
        terms: map,
        total: tape.scalar_value(total),
        ..LossBreakdown::default()
    }
}

/// Stage-2 loss values without any update.
pub fn dfen_objective(
    models: &Models,
    images: &[&ImageTensor],
    labels: &[usize],
    w: &LossWeights,
    attention: AttentionMode,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, |_| false);
    let (terms, total) = dfen_graph(&mut fwd, images, labels, w, attention)?;
    Ok(dfen_breakdown(fwd.tape, &terms, total))
}

/// Stage-2 loss and named gradients for the requested parameter set.
pub fn dfen_gradients(
    models: &Models,
    images: &[&ImageTensor],
    labels: &[usize],
    w: &LossWeights,
    attention: AttentionMode,
    trainable: impl Fn(&str) -> bool,
) -> Result<(LossBreakdown, BTreeMap<String, ArrayD<f64>>)> {
    let mut tape = Tape::new();
    let mut fwd = models.forward(&mut tape, trainable);
    let (terms, total) = dfen_graph(&mut fwd, images, labels, w, attention)?;
    let breakdown = dfen_breakdown(fwd.tape, &terms, total);
    let grad_list = fwd.tape.backward(total);
    let grads = fwd.gradients(&grad_list);
    Ok((breakdown, grads))
}

/// Owns the models through Stage 2 and applies one update per batch.
pub struct DfenTrainer {
    pub models: Models,
    cfg: TrainConfig,
    attention: AttentionMode,
    adam: AdamConfig,
}

impl DfenTrainer {
    pub fn new(models: Models, cfg: TrainConfig, attention: AttentionMode) -> Result<Self> {
        if cfg.stage != TrainStage::Dfen {
            return Err(Error::Config(format!(
                "DFEN trainer needs a dfen configuration, got {:?}",
                cfg.stage
            )));
        }
        cfg.validate()?;
        Ok(DfenTrainer {
            models,
            cfg,
            attention,
            adam: AdamConfig::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn finetune(&self) -> bool {
        self.cfg.learning_rates.finetune_scale > 0.0
    }

    fn lr_for(&self) -> impl Fn(&str) -> f64 {
        let classifier = self.cfg.learning_rates.classifier;
        let finetune = classifier * self.cfg.learning_rates.finetune_scale;
        move |name: &str| {
            if name.starts_with("ec.") || name.starts_with("eid.") {
                finetune
            } else {
                classifier
            }
        }
    }

    /// One Stage-2 update over a labeled batch.
    pub fn step(&mut self, batch: &LabeledBatch) -> Result<LossBreakdown> {
        let images = batch.image_refs();
        let labels = batch.label_indices();
        let (report, grads) = dfen_gradients(
            &self.models,
            &images,
            &labels,
            &self.cfg.weights,
            self.attention,
            dfen_trainable(self.attention, self.finetune()),
        )?;
        self.models.store.adam_step(&grads, &self.adam, self.lr_for())?;
        Ok(report)
    }
}
