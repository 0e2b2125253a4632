//! The learnable components, as functions of a [`Tape`].
//!
//! Seven networks share one [`ParamStore`]:
//!
//! * `E_c` (`ec.`) — multi-scale content encoder; input-resolution branches
//!   are fused by resize-and-sum, and the final 1×1 projection is linear so
//!   pooled statistics stay unconstrained.
//! * `E_d` / `E_d'` (`ed.` / `edp.`) — degradation encoders with identical
//!   architecture and independent weights. Neither uses normalization:
//!   degradation expresses itself partly through global statistics, which
//!   instance norm would erase.
//! * `G` (`g.`) — decoder; a small MLP maps the degradation code to
//!   per-layer AdaIN (scale, bias) pairs, zero-initialized so decoding
//!   starts from plain instance normalization.
//! * `D_r` (`dr.`) — multi-scale PatchGAN reality discriminator.
//! * `D_d` (`dd.`) — degradation discriminator with the same patch
//!   structure; it additionally exposes a pooled penultimate feature
//!   vector (the "cue") that drives the attention head.
//! * `E_id` (`eid.`, head `eid_cls.`) — identity encoder, pretrained with
//!   its own classifier before adversarial training begins.
//! * Attention (`att.`) and classifier heads (`cls_fc.`, `cls_inv.`,
//!   `cls_sen.`, `cls_both.`).
//!
//! Training code drives the batched, differentiable forwards through
//! [`Forward`]; the single-image methods on [`Models`] give the same
//! computations in evaluation mode (all parameters constant).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix2, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{ImageGeometry, ImageTensor};
use crate::params::{scaled_normal, zeros, Bound, ParamStore};
use crate::rng::derive_rng;

/// ε inside every instance-normalization denominator (plain and AdaIN).
pub const ADAIN_EPS: f64 = 1e-5;

const LRELU_SLOPE: f64 = 0.2;
const CHANNELS: usize = ImageTensor::CHANNELS;

// Fixed layer widths. These are backbone implementation details rather
// than interface knobs: the configurable quantities are the feature
// dimensions that other components consume.
const EC_STEM: usize = 12;
const EC_TRUNK: usize = 24;
// Initial bias of the learned affine that follows each content-encoder
// instance norm. Global average pooling passes per-channel offsets through
// unchanged while shrinking spatially varying signal by sqrt(H*W), so with
// dense ReLU activations the pooled features of *any* two images start out
// nearly parallel (cosine > 0.99) and no training signal survives in the
// pooled-cosine statistic. Starting the activations sparse keeps the
// input-independent component small; the affine is learnable, so training
// is free to densify it again.
const EC_NORM_BIAS_INIT: f64 = -2.0;
const ED_WIDTHS: [usize; 3] = [12, 24, 32];
const EID_WIDTHS: [usize; 3] = [12, 24, 48];
const D_WIDTHS: [usize; 2] = [16, 32];
const DR_PENULT: usize = 64;
const G_WIDTH: usize = 40;
const G_UP_WIDTHS: [usize; 3] = [24, 16, 8];
const G_ADAIN_LAYERS: usize = 4;

/// Channel counts and structural knobs shared by every network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub geometry: ImageGeometry,
    /// Content feature channels (the map and its pooled vector).
    pub content_channels: usize,
    /// Degradation code length.
    pub degradation_dim: usize,
    /// Identity embedding length (the sensitive feature).
    pub sensitive_dim: usize,
    /// Pooled penultimate feature length exposed by `D_d`.
    pub cue_dim: usize,
    /// Input-resolution branches in the content encoder (1–3).
    pub encoder_scales: usize,
    /// PatchGAN scales in both discriminators (1–3).
    pub discriminator_scales: usize,
    /// Classifier output width.
    pub num_identities: usize,
}

impl NetworkConfig {
    /// Desk-scale default: 64×32 inputs, full feature widths.
    pub fn desk(num_identities: usize) -> Self {
        NetworkConfig {
            geometry: ImageGeometry {
                height: 64,
                width: 32,
            },
            content_channels: 128,
            degradation_dim: 64,
            sensitive_dim: 256,
            cue_dim: 128,
            encoder_scales: 3,
            discriminator_scales: 2,
            num_identities,
        }
    }

    /// Miniature config for gradient checks: 16×8 inputs, narrow features.
    pub fn tiny(num_identities: usize) -> Self {
        NetworkConfig {
            geometry: ImageGeometry {
                height: 16,
                width: 8,
            },
            content_channels: 8,
            degradation_dim: 8,
            sensitive_dim: 16,
            cue_dim: 16,
            encoder_scales: 3,
            discriminator_scales: 2,
            num_identities,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("content_channels", self.content_channels),
            ("degradation_dim", self.degradation_dim),
            ("sensitive_dim", self.sensitive_dim),
            ("cue_dim", self.cue_dim),
            ("encoder_scales", self.encoder_scales),
            ("discriminator_scales", self.discriminator_scales),
            ("num_identities", self.num_identities),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.encoder_scales > 3 {
            return Err(Error::Config(format!(
                "encoder_scales {} unsupported (1–3)",
                self.encoder_scales
            )));
        }
        if self.discriminator_scales > 3 {
            return Err(Error::Config(format!(
                "discriminator_scales {} unsupported (1–3)",
                self.discriminator_scales
            )));
        }
        if self.geometry.height % 8 != 0 || self.geometry.width % 8 != 0 {
            return Err(Error::Config(format!(
                "geometry {} must have height and width divisible by 8",
                self.geometry
            )));
        }
        if self.cue_dim % self.discriminator_scales != 0 {
            return Err(Error::Config(format!(
                "cue_dim {} must divide evenly across {} discriminator scales",
                self.cue_dim, self.discriminator_scales
            )));
        }
        Ok(())
    }

    /// Spatial size of the content map: input geometry over 8.
    pub fn content_map_geometry(&self) -> (usize, usize) {
        (self.geometry.height / 8, self.geometry.width / 8)
    }

    /// Length of the fused identity representation.
    pub fn fused_dim(&self) -> usize {
        self.content_channels + self.sensitive_dim
    }

    fn dd_penult(&self) -> usize {
        self.cue_dim / self.discriminator_scales
    }
}

/// Which degradation encoder to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradationSource {
    /// `E_d`: encodes degradations of real captures.
    RealEncoder,
    /// `E_d'`: encodes synthetic degradations; trained to pull them toward
    /// the real encoder's manifold.
    SelfEncoder,
}

impl DegradationSource {
    fn prefix(self) -> &'static str {
        match self {
            DegradationSource::RealEncoder => "ed",
            DegradationSource::SelfEncoder => "edp",
        }
    }
}

/// Which linear classifier head to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierHead {
    /// Stage-1 head over pooled content features; discarded afterwards.
    ContentStage1,
    /// Stage-2 head over the invariant feature.
    Invariant,
    /// Stage-2 head over the attention-weighted sensitive feature.
    Sensitive,
    /// Stage-2 head over the fused representation.
    Fused,
}

impl ClassifierHead {
    fn name(self) -> &'static str {
        match self {
            ClassifierHead::ContentStage1 => "cls_fc",
            ClassifierHead::Invariant => "cls_inv",
            ClassifierHead::Sensitive => "cls_sen",
            ClassifierHead::Fused => "cls_both",
        }
    }
}

/// Decoder behavior switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderMode {
    /// The learned decoder.
    #[default]
    Learned,
    /// Diagnostic stub: upsample the first three content channels straight
    /// to image geometry, bypassing all decoder parameters. Lets training
    /// plumbing be exercised with a generator whose output is a pure
    /// function of content.
    ContentPassthrough,
}

/// Content feature: spatial map plus its global average.
#[derive(Debug, Clone)]
pub struct ContentFeature {
    pub map: Array3<f64>,
    pub pooled: Array1<f64>,
}

/// Degradation code with provenance.
#[derive(Debug, Clone)]
pub struct DegradationCode {
    pub vector: Array1<f64>,
    pub source: DegradationSource,
}

/// Scalar degradation score plus the pooled penultimate cue.
#[derive(Debug, Clone)]
pub struct DegradationScore {
    pub score: f64,
    pub cue: Array1<f64>,
}

/// The fused identity representation and its parts.
#[derive(Debug, Clone)]
pub struct IdentityRepresentation {
    pub f_inv: Array1<f64>,
    pub f_sen: Array1<f64>,
    pub weights: Array1<f64>,
    pub fused: Array1<f64>,
}

impl IdentityRepresentation {
    /// Builds the fused vector: `concat(f_inv, f_sen ⊙ weights)`.
    pub fn assemble(
        f_inv: Array1<f64>,
        f_sen: Array1<f64>,
        weights: Array1<f64>,
    ) -> Result<Self> {
        if f_sen.len() != weights.len() {
            return Err(Error::shape(
                "identity representation",
                format!("weights of length {}", f_sen.len()),
                format!("length {}", weights.len()),
            ));
        }
        let mut fused = Array1::zeros(f_inv.len() + f_sen.len());
        fused.slice_mut(ndarray::s![..f_inv.len()]).assign(&f_inv);
        let weighted = &f_sen * &weights;
        fused.slice_mut(ndarray::s![f_inv.len()..]).assign(&weighted);
        Ok(IdentityRepresentation {
            f_inv,
            f_sen,
            weights,
            fused,
        })
    }
}

/// Per-channel affine re-statistics: `scale · (x − μ)/√(σ² + ε) + bias`,
/// with moments taken over each channel's spatial positions.
pub fn adain(
    feature_map: &Array3<f64>,
    scale: &Array1<f64>,
    bias: &Array1<f64>,
) -> Result<Array3<f64>> {
    let (c, h, w) = feature_map.dim();
    if scale.len() != c || bias.len() != c {
        return Err(Error::shape(
            "adain",
            format!("scale and bias of length {c}"),
            format!("lengths {} and {}", scale.len(), bias.len()),
        ));
    }
    let m = (h * w) as f64;
    let mut out = feature_map.clone();
    for ci in 0..c {
        let mut plane = out.slice_mut(ndarray::s![ci, .., ..]);
        let mean = plane.iter().sum::<f64>() / m;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let inv = 1.0 / (var + ADAIN_EPS).sqrt();
        let (s, b) = (scale[ci], bias[ci]);
        plane.mapv_inplace(|v| s * (v - mean) * inv + b);
    }
    Ok(out)
}

/// All networks plus their shared parameter store.
pub struct Models {
    config: NetworkConfig,
    pub store: ParamStore,
    pub decoder_mode: DecoderMode,
}

impl Models {
    /// Registers and initializes every parameter. Initialization draws an
    /// independent stream per parameter name, so values do not depend on
    /// registration order.
    pub fn new(config: NetworkConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        register_all(&config, &mut store, init_seed)?;
        Ok(Models {
            config,
            store,
            decoder_mode: DecoderMode::Learned,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Starts a differentiable forward pass over `tape`; parameters for
    /// which `trainable` holds enter as leaves, the rest as constants.
    pub fn forward<'t>(&self, tape: &'t mut Tape, trainable: impl Fn(&str) -> bool) -> Forward<'t> {
        Forward {
            bound: self.store.bind(tape, trainable),
            tape,
            cfg: self.config.clone(),
            mode: self.decoder_mode,
        }
    }

    fn with_eval<R>(&self, f: impl FnOnce(&mut Forward) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        let mut fwd = self.forward(&mut tape, |_| false);
        f(&mut fwd)
    }

    /// Evaluation-mode content encoding of one image.
    pub fn encode_content(&self, x: &ImageTensor) -> Result<ContentFeature> {
        self.with_eval(|fwd| {
            let input = fwd.input(&[x])?;
            let content = fwd.encode_content(input);
            let map = fwd.tape.value(content.map).clone();
            let pooled = fwd.tape.value(content.pooled).clone();
            let map4 = map.into_dimensionality::<Ix4>().expect("content map rank");
            let (_, c, h, w) = map4.dim();
            let map3 = map4
                .into_shape_with_order((c, h, w))
                .expect("single-image batch");
            let pooled2 = pooled.into_dimensionality::<Ix2>().expect("pooled rank");
            Ok(ContentFeature {
                map: map3,
                pooled: pooled2.row(0).to_owned(),
            })
        })
    }

    /// Evaluation-mode degradation encoding of one image.
    pub fn encode_degradation(
        &self,
        x: &ImageTensor,
        source: DegradationSource,
    ) -> Result<DegradationCode> {
        let rows = self.encode_degradation_batch(&[x], source)?;
        Ok(DegradationCode {
            vector: rows.row(0).to_owned(),
            source,
        })
    }

    /// Batched evaluation-mode degradation encoding; row `i` corresponds
    /// to image `i`.
    pub fn encode_degradation_batch(
        &self,
        xs: &[&ImageTensor],
        source: DegradationSource,
    ) -> Result<Array2<f64>> {
        self.with_eval(|fwd| {
            let input = fwd.input(xs)?;
            let code = fwd.encode_degradation(input, source);
            Ok(fwd
                .tape
                .value(code)
                .clone()
                .into_dimensionality::<Ix2>()
                .expect("code rank"))
        })
    }

    /// Evaluation-mode decoding of a content feature under a degradation
    /// code.
    pub fn decode(&self, f_c: &ContentFeature, f_d: &DegradationCode) -> Result<ImageTensor> {
        let (mh, mw) = self.config.content_map_geometry();
        let expected = (self.config.content_channels, mh, mw);
        if f_c.map.dim() != expected {
            return Err(Error::shape(
                "decoder content map",
                format!("{expected:?}"),
                format!("{:?}", f_c.map.dim()),
            ));
        }
        if f_d.vector.len() != self.config.degradation_dim {
            return Err(Error::shape(
                "decoder degradation code",
                format!("length {}", self.config.degradation_dim),
                format!("length {}", f_d.vector.len()),
            ));
        }
        self.with_eval(|fwd| {
            let (c, h, w) = f_c.map.dim();
            let map = fwd.tape.constant(
                f_c.map
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, c, h, w]))
                    .expect("reshape"),
            );
            let code = fwd.tape.constant(
                f_d.vector
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, f_d.vector.len()]))
                    .expect("reshape"),
            );
            let out = fwd.decode(map, code);
            let out4 = fwd
                .tape
                .value(out)
                .clone()
                .into_dimensionality::<Ix4>()
                .expect("decoded rank");
            let (_, oc, oh, ow) = out4.dim();
            let img = out4
                .into_shape_with_order((oc, oh, ow))
                .expect("single-image batch");
            ImageTensor::new(img)
        })
    }

    /// Evaluation-mode reality discrimination: one patch-logit map per
    /// scale.
    pub fn discriminate_reality(&self, x: &ImageTensor) -> Result<Vec<Array2<f64>>> {
        self.with_eval(|fwd| {
            let input = fwd.input(&[x])?;
            let maps = fwd.discriminate_reality(input);
            maps.into_iter()
                .map(|m| {
                    let v = fwd
                        .tape
                        .value(m)
                        .clone()
                        .into_dimensionality::<Ix4>()
                        .expect("patch map rank");
                    let (_, _, h, w) = v.dim();
                    Ok(v.into_shape_with_order((h, w)).expect("single map"))
                })
                .collect()
        })
    }

    /// Evaluation-mode degradation scoring.
    pub fn degradation_score(&self, x: &ImageTensor) -> Result<DegradationScore> {
        self.with_eval(|fwd| {
            let input = fwd.input(&[x])?;
            let deg = fwd.degradation_forward(input);
            let score = fwd.tape.value(deg.score)[[0, 0]];
            let cue = fwd
                .tape
                .value(deg.cue)
                .clone()
                .into_dimensionality::<Ix2>()
                .expect("cue rank")
                .row(0)
                .to_owned();
            Ok(DegradationScore { score, cue })
        })
    }

    /// Evaluation-mode patch maps of the degradation discriminator.
    pub fn degradation_maps(&self, x: &ImageTensor) -> Result<Vec<Array2<f64>>> {
        self.with_eval(|fwd| {
            let input = fwd.input(&[x])?;
            let deg = fwd.degradation_forward(input);
            deg.maps
                .into_iter()
                .map(|m| {
                    let v = fwd
                        .tape
                        .value(m)
                        .clone()
                        .into_dimensionality::<Ix4>()
                        .expect("patch map rank");
                    let (_, _, h, w) = v.dim();
                    Ok(v.into_shape_with_order((h, w)).expect("single map"))
                })
                .collect()
        })
    }

    /// Evaluation-mode identity embedding of one image.
    pub fn encode_identity(&self, x: &ImageTensor) -> Result<Array1<f64>> {
        let rows = self.encode_identity_batch(&[x])?;
        Ok(rows.row(0).to_owned())
    }

    /// Batched evaluation-mode identity embeddings.
    pub fn encode_identity_batch(&self, xs: &[&ImageTensor]) -> Result<Array2<f64>> {
        self.with_eval(|fwd| {
            let input = fwd.input(xs)?;
            let emb = fwd.identity_embedding(input);
            Ok(fwd
                .tape
                .value(emb)
                .clone()
                .into_dimensionality::<Ix2>()
                .expect("embedding rank"))
        })
    }

    /// Evaluation-mode attention weights for a degradation cue.
    pub fn attention_weights(&self, cue: &Array1<f64>) -> Result<Array1<f64>> {
        if cue.len() != self.config.cue_dim {
            return Err(Error::shape(
                "attention cue",
                format!("length {}", self.config.cue_dim),
                format!("length {}", cue.len()),
            ));
        }
        self.with_eval(|fwd| {
            let c = fwd.tape.constant(
                cue.clone()
                    .into_shape_with_order(IxDyn(&[1, cue.len()]))
                    .expect("reshape"),
            );
            let w = fwd.attention(c);
            Ok(fwd
                .tape
                .value(w)
                .clone()
                .into_dimensionality::<Ix2>()
                .expect("weights rank")
                .row(0)
                .to_owned())
        })
    }

    /// Evaluation-mode fused identity representation of one image.
    pub fn identity_representation(&self, x: &ImageTensor) -> Result<IdentityRepresentation> {
        self.with_eval(|fwd| {
            let input = fwd.input(&[x])?;
            let content = fwd.encode_content(input);
            let emb = fwd.identity_embedding(input);
            let deg = fwd.degradation_forward(input);
            let weights = fwd.attention(deg.cue);
            let f_inv = row0(fwd.tape.value(content.pooled));
            let f_sen = row0(fwd.tape.value(emb));
            let w = row0(fwd.tape.value(weights));
            IdentityRepresentation::assemble(f_inv, f_sen, w)
        })
    }
}

fn row0(value: &ArrayD<f64>) -> Array1<f64> {
    value
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("matrix rank")
        .row(0)
        .to_owned()
}

/// Differentiable batched forward passes bound to one tape.
pub struct Forward<'t> {
    pub tape: &'t mut Tape,
    bound: Bound,
    cfg: NetworkConfig,
    mode: DecoderMode,
}

/// Content encoder output on the tape.
pub struct ContentVars {
    /// `(N, C_c, H/8, W/8)`
    pub map: Var,
    /// `(N, C_c)`
    pub pooled: Var,
}

/// Degradation discriminator output on the tape.
pub struct DegradationVars {
    /// Patch-logit maps, one per scale: `(N, 1, h_k, w_k)`.
    pub maps: Vec<Var>,
    /// Per-sample mean over all patches across scales: `(N, 1)`.
    pub score: Var,
    /// Pooled penultimate features: `(N, C_cue)`.
    pub cue: Var,
}

impl<'t> Forward<'t> {
    /// Stacks images into an `(N, 3, H, W)` constant input node.
    pub fn input(&mut self, images: &[&ImageTensor]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Shape {
                context: "network input",
                expected: "at least one image".to_string(),
                actual: "empty batch".to_string(),
            });
        }
        let geom = self.cfg.geometry;
        let mut batch =
            Array4::<f64>::zeros((images.len(), CHANNELS, geom.height, geom.width));
        for (i, img) in images.iter().enumerate() {
            if img.geometry() != geom {
                return Err(Error::shape(
                    "network input",
                    geom.to_string(),
                    img.geometry().to_string(),
                ));
            }
            batch.slice_mut(ndarray::s![i, .., .., ..]).assign(img.data());
        }
        Ok(self.tape.constant(batch.into_dyn()))
    }

    /// Enters a prebuilt `(N, 3, H, W)` batch as a constant.
    pub fn input_array(&mut self, batch: Array4<f64>) -> Var {
        self.tape.constant(batch.into_dyn())
    }

    pub fn var(&self, name: &str) -> Var {
        self.bound.var(name)
    }

    /// Named gradients after a backward sweep.
    pub fn gradients(
        &self,
        grads: &[Option<ArrayD<f64>>],
    ) -> std::collections::BTreeMap<String, ArrayD<f64>> {
        self.bound.gradients(self.tape, grads)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Var {
        let w = self.bound.var(&format!("{name}.w"));
        let b = self.bound.var(&format!("{name}.b"));
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn lin(&mut self, x: Var, name: &str) -> Var {
        let w = self.bound.var(&format!("{name}.w"));
        let b = self.bound.var(&format!("{name}.b"));
        self.tape.linear(x, w, b)
    }

    /// Instance norm followed by the layer's learned channel affine.
    fn norm(&mut self, x: Var, name: &str) -> Var {
        let normed = self.tape.instance_norm(x, ADAIN_EPS);
        let s = self.bound.var(&format!("{name}.norm.w"));
        let b = self.bound.var(&format!("{name}.norm.b"));
        self.tape.channel_affine_c(normed, s, b)
    }

    fn spatial(&self, v: Var) -> (usize, usize) {
        let shape = self.tape.value(v).shape();
        (shape[2], shape[3])
    }

    /// Multi-scale content encoding.
    pub fn encode_content(&mut self, x: Var) -> ContentVars {
        let (th, tw) = self.cfg.content_map_geometry();
        let mut fused: Option<Var> = None;
        for s in 0..self.cfg.encoder_scales {
            let mut h = x;
            for _ in 0..s {
                h = self.tape.avg_pool2(h);
            }
            let convs = 3 - s;
            for j in 0..convs {
                let name = format!("ec.b{s}.c{j}");
                h = self.conv(h, &name, 2, 1);
                h = self.norm(h, &name);
                h = self.tape.relu(h);
            }
            if self.spatial(h) != (th, tw) {
                h = self.tape.upsample_nearest_to(h, th, tw);
            }
            fused = Some(match fused {
                None => h,
                Some(f) => self.tape.add(f, h),
            });
        }
        let mut h = fused.expect("at least one encoder scale");
        h = self.conv(h, "ec.fuse", 1, 1);
        h = self.norm(h, "ec.fuse");
        h = self.tape.relu(h);
        let map = self.conv(h, "ec.out", 1, 0);
        let pooled = self.tape.global_avg_pool(map);
        ContentVars { map, pooled }
    }

    /// Degradation encoding through `E_d` or `E_d'`.
    pub fn encode_degradation(&mut self, x: Var, source: DegradationSource) -> Var {
        let p = source.prefix();
        let mut h = x;
        for (j, _) in ED_WIDTHS.iter().enumerate() {
            h = self.conv(h, &format!("{p}.c{j}"), 2, 1);
            h = self.tape.relu(h);
        }
        let pooled = self.tape.global_avg_pool(h);
        self.lin(pooled, &format!("{p}.fc"))
    }

    /// Decoding: content map plus degradation code to an image batch in
    /// (0, 1).
    pub fn decode(&mut self, map: Var, f_d: Var) -> Var {
        let geom = self.cfg.geometry;
        if self.mode == DecoderMode::ContentPassthrough {
            assert!(
                self.cfg.content_channels >= CHANNELS,
                "passthrough decoding needs at least {CHANNELS} content channels"
            );
            let ch = self.tape.narrow1(map, 0, CHANNELS);
            let up = self.tape.upsample_nearest_to(ch, geom.height, geom.width);
            return self.tape.sigmoid(up);
        }
        // Degradation code -> per-layer AdaIN (scale, bias) pairs. The
        // final MLP layer starts at zero, so raw outputs perturb around
        // scale 1, bias 0.
        let hidden = self.lin(f_d, "g.mlp.fc1");
        let hidden = self.tape.relu(hidden);
        let raw = self.lin(hidden, "g.mlp.fc2");
        let mut styles = Vec::with_capacity(G_ADAIN_LAYERS);
        for layer in 0..G_ADAIN_LAYERS {
            let base = layer * 2 * G_WIDTH;
            let raw_scale = self.tape.narrow1(raw, base, G_WIDTH);
            let scale = self.tape.add_const(raw_scale, 1.0);
            let bias = self.tape.narrow1(raw, base + G_WIDTH, G_WIDTH);
            styles.push((scale, bias));
        }
        let mut h = self.conv(map, "g.entry", 1, 0);
        // The style blocks run after the first ×2 upsample: the widened
        // grid gives the AdaIN statistics enough spatial samples to stay
        // well-conditioned even at the smallest supported geometry.
        let (mut ch, mut cw) = self.cfg.content_map_geometry();
        ch *= 2;
        cw *= 2;
        h = self.tape.upsample_nearest_to(h, ch, cw);
        h = self.residual_block(h, "g.rb1", styles[0], styles[1]);
        h = self.residual_block(h, "g.rb2", styles[2], styles[3]);
        for (i, _) in G_UP_WIDTHS.iter().enumerate() {
            if i > 0 {
                ch *= 2;
                cw *= 2;
                h = self.tape.upsample_nearest_to(h, ch, cw);
            }
            h = self.conv(h, &format!("g.up{i}"), 1, 1);
            h = self.tape.relu(h);
        }
        debug_assert_eq!((ch, cw), (geom.height, geom.width));
        let out = self.conv(h, "g.out", 1, 1);
        self.tape.sigmoid(out)
    }

    fn adain_layer(&mut self, x: Var, style: (Var, Var)) -> Var {
        let normed = self.tape.instance_norm(x, ADAIN_EPS);
        self.tape.channel_affine_nc(normed, style.0, style.1)
    }

    fn residual_block(&mut self, x: Var, name: &str, s1: (Var, Var), s2: (Var, Var)) -> Var {
        let mut h = self.conv(x, &format!("{name}.c1"), 1, 1);
        h = self.adain_layer(h, s1);
        h = self.tape.relu(h);
        h = self.conv(h, &format!("{name}.c2"), 1, 1);
        h = self.adain_layer(h, s2);
        self.tape.add(x, h)
    }

    /// Multi-scale PatchGAN reality logits, one map per scale.
    pub fn discriminate_reality(&mut self, x: Var) -> Vec<Var> {
        let mut maps = Vec::with_capacity(self.cfg.discriminator_scales);
        for k in 0..self.cfg.discriminator_scales {
            let mut h = x;
            for _ in 0..k {
                h = self.tape.avg_pool2(h);
            }
            for (j, _) in D_WIDTHS.iter().enumerate() {
                h = self.conv(h, &format!("dr.s{k}.c{j}"), 2, 1);
                h = self.tape.leaky_relu(h, LRELU_SLOPE);
            }
            h = self.conv(h, &format!("dr.s{k}.c2"), 2, 1);
            h = self.tape.leaky_relu(h, LRELU_SLOPE);
            maps.push(self.conv(h, &format!("dr.s{k}.out"), 1, 1));
        }
        maps
    }

    /// Degradation discriminator: patch maps, per-sample score, pooled
    /// cue.
    pub fn degradation_forward(&mut self, x: Var) -> DegradationVars {
        let mut maps = Vec::with_capacity(self.cfg.discriminator_scales);
        let mut cues = Vec::with_capacity(self.cfg.discriminator_scales);
        let mut patch_counts = Vec::with_capacity(self.cfg.discriminator_scales);
        for k in 0..self.cfg.discriminator_scales {
            let mut h = x;
            for _ in 0..k {
                h = self.tape.avg_pool2(h);
            }
            for (j, _) in D_WIDTHS.iter().enumerate() {
                h = self.conv(h, &format!("dd.s{k}.c{j}"), 2, 1);
                h = self.tape.leaky_relu(h, LRELU_SLOPE);
            }
            h = self.conv(h, &format!("dd.s{k}.c2"), 2, 1);
            h = self.tape.leaky_relu(h, LRELU_SLOPE);
            cues.push(self.tape.global_avg_pool(h));
            let map = self.conv(h, &format!("dd.s{k}.out"), 1, 1);
            let (mh, mw) = self.spatial(map);
            patch_counts.push(mh * mw);
            maps.push(map);
        }
        // Grand mean over all patches = patch-count-weighted mean of the
        // per-scale means.
        let total: usize = patch_counts.iter().sum();
        let mut score: Option<Var> = None;
        for (map, count) in maps.iter().zip(&patch_counts) {
            let mean_k = self.tape.global_avg_pool(*map);
            let weighted = self.tape.scale(mean_k, *count as f64 / total as f64);
            score = Some(match score {
                None => weighted,
                Some(acc) => self.tape.add(acc, weighted),
            });
        }
        let cue = self.tape.concat_cols(&cues);
        DegradationVars {
            maps,
            score: score.expect("at least one scale"),
            cue,
        }
    }

    /// Identity embedding `(N, C_s)`.
    pub fn identity_embedding(&mut self, x: Var) -> Var {
        let mut h = x;
        for (j, _) in EID_WIDTHS.iter().enumerate() {
            h = self.conv(h, &format!("eid.c{j}"), 2, 1);
            h = self.tape.relu(h);
        }
        let pooled = self.tape.global_avg_pool(h);
        self.lin(pooled, "eid.fc")
    }

    /// Identity classifier logits over an embedding batch.
    pub fn identity_logits(&mut self, emb: Var) -> Var {
        self.lin(emb, "eid_cls")
    }

    /// Attention weights `(N, C_s)` in (0, 1) from degradation cues.
    pub fn attention(&mut self, cue: Var) -> Var {
        let h = self.lin(cue, "att.fc1");
        let h = self.tape.relu(h);
        let raw = self.lin(h, "att.fc2");
        self.tape.sigmoid(raw)
    }

    /// Linear classifier logits for the chosen head.
    pub fn classifier_logits(&mut self, features: Var, head: ClassifierHead) -> Var {
        self.lin(features, head.name())
    }
}

// ---------------------------------------------------------------------------
// Parameter registration
// ---------------------------------------------------------------------------

fn reg_conv(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    gain: f64,
) -> Result<()> {
    let shape = [out_c, in_c, k, k];
    let w = if gain == 0.0 {
        zeros(&shape)
    } else {
        let mut rng = derive_rng(seed, &format!("param.{name}"), &[]);
        scaled_normal(&mut rng, &shape, in_c * k * k, gain)
    };
    store.insert(&format!("{name}.w"), w)?;
    store.insert(&format!("{name}.b"), zeros(&[out_c]))
}

fn reg_norm(store: &mut ParamStore, name: &str, channels: usize, bias: f64) -> Result<()> {
    store.insert(
        &format!("{name}.norm.w"),
        ArrayD::from_elem(IxDyn(&[channels]), 1.0),
    )?;
    store.insert(
        &format!("{name}.norm.b"),
        ArrayD::from_elem(IxDyn(&[channels]), bias),
    )
}

fn reg_linear(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    out_f: usize,
    in_f: usize,
    gain: f64,
) -> Result<()> {
    let shape = [out_f, in_f];
    let w = if gain == 0.0 {
        zeros(&shape)
    } else {
        let mut rng = derive_rng(seed, &format!("param.{name}"), &[]);
        scaled_normal(&mut rng, &shape, in_f, gain)
    };
    store.insert(&format!("{name}.w"), w)?;
    store.insert(&format!("{name}.b"), zeros(&[out_f]))
}

fn register_all(cfg: &NetworkConfig, store: &mut ParamStore, seed: u64) -> Result<()> {
    // Content encoder branches: branch s sees the input pooled s times and
    // applies 3 − s stride-2 convolutions to land on the /8 grid.
    for s in 0..cfg.encoder_scales {
        let convs = 3 - s;
        let mut in_c = CHANNELS;
        for j in 0..convs {
            let out_c = if j == 0 && convs > 1 { EC_STEM } else { EC_TRUNK };
            let name = format!("ec.b{s}.c{j}");
            reg_conv(store, seed, &name, out_c, in_c, 3, 2.0)?;
            reg_norm(store, &name, out_c, EC_NORM_BIAS_INIT)?;
            in_c = out_c;
        }
    }
    reg_conv(store, seed, "ec.fuse", cfg.content_channels, EC_TRUNK, 3, 2.0)?;
    reg_norm(store, "ec.fuse", cfg.content_channels, EC_NORM_BIAS_INIT)?;
    reg_conv(
        store,
        seed,
        "ec.out",
        cfg.content_channels,
        cfg.content_channels,
        1,
        1.0,
    )?;

    // Degradation encoders: same architecture, independent weights.
    for prefix in ["ed", "edp"] {
        let mut in_c = CHANNELS;
        for (j, &out_c) in ED_WIDTHS.iter().enumerate() {
            reg_conv(store, seed, &format!("{prefix}.c{j}"), out_c, in_c, 3, 2.0)?;
            in_c = out_c;
        }
        reg_linear(
            store,
            seed,
            &format!("{prefix}.fc"),
            cfg.degradation_dim,
            ED_WIDTHS[2],
            1.0,
        )?;
    }

    // Decoder.
    reg_conv(store, seed, "g.entry", G_WIDTH, cfg.content_channels, 1, 1.0)?;
    for rb in ["g.rb1", "g.rb2"] {
        reg_conv(store, seed, &format!("{rb}.c1"), G_WIDTH, G_WIDTH, 3, 2.0)?;
        reg_conv(store, seed, &format!("{rb}.c2"), G_WIDTH, G_WIDTH, 3, 2.0)?;
    }
    let mut in_c = G_WIDTH;
    for (i, &out_c) in G_UP_WIDTHS.iter().enumerate() {
        reg_conv(store, seed, &format!("g.up{i}"), out_c, in_c, 3, 2.0)?;
        in_c = out_c;
    }
    reg_conv(store, seed, "g.out", CHANNELS, in_c, 3, 1.0)?;
    reg_linear(store, seed, "g.mlp.fc1", 64, cfg.degradation_dim, 2.0)?;
    // Small start: AdaIN layers begin close to plain instance norm
    // (scale ≈ 1, bias ≈ 0) but are already sensitive to the code, so
    // decoding responds to f_d from the first step.
    reg_linear(store, seed, "g.mlp.fc2", G_ADAIN_LAYERS * 2 * G_WIDTH, 64, 0.01)?;

    // Discriminators: independent weights per scale.
    for k in 0..cfg.discriminator_scales {
        let mut in_c = CHANNELS;
        for (j, &out_c) in D_WIDTHS.iter().enumerate() {
            reg_conv(store, seed, &format!("dr.s{k}.c{j}"), out_c, in_c, 3, 2.0)?;
            in_c = out_c;
        }
        reg_conv(store, seed, &format!("dr.s{k}.c2"), DR_PENULT, in_c, 3, 2.0)?;
        reg_conv(store, seed, &format!("dr.s{k}.out"), 1, DR_PENULT, 3, 1.0)?;

        let mut in_c = CHANNELS;
        for (j, &out_c) in D_WIDTHS.iter().enumerate() {
            reg_conv(store, seed, &format!("dd.s{k}.c{j}"), out_c, in_c, 3, 2.0)?;
            in_c = out_c;
        }
        let penult = cfg.dd_penult();
        reg_conv(store, seed, &format!("dd.s{k}.c2"), penult, in_c, 3, 2.0)?;
        reg_conv(store, seed, &format!("dd.s{k}.out"), 1, penult, 3, 1.0)?;
    }

    // Identity encoder and its pretraining head.
    let mut in_c = CHANNELS;
    for (j, &out_c) in EID_WIDTHS.iter().enumerate() {
        reg_conv(store, seed, &format!("eid.c{j}"), out_c, in_c, 3, 2.0)?;
        in_c = out_c;
    }
    reg_linear(store, seed, "eid.fc", cfg.sensitive_dim, EID_WIDTHS[2], 1.0)?;
    reg_linear(
        store,
        seed,
        "eid_cls",
        cfg.num_identities,
        cfg.sensitive_dim,
        1.0,
    )?;

    // Attention head; zero-initialized output layer puts initial weights
    // at sigmoid(0) = 0.5 for every cue.
    reg_linear(store, seed, "att.fc1", 64, cfg.cue_dim, 2.0)?;
    reg_linear(store, seed, "att.fc2", cfg.sensitive_dim, 64, 0.0)?;

    // Classifier heads.
    reg_linear(
        store,
        seed,
        "cls_fc",
        cfg.num_identities,
        cfg.content_channels,
        1.0,
    )?;
    reg_linear(
        store,
        seed,
        "cls_inv",
        cfg.num_identities,
        cfg.content_channels,
        1.0,
    )?;
    reg_linear(
        store,
        seed,
        "cls_sen",
        cfg.num_identities,
        cfg.sensitive_dim,
        1.0,
    )?;
    reg_linear(
        store,
        seed,
        "cls_both",
        cfg.num_identities,
        cfg.fused_dim(),
        1.0,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"DIRK";
const CHECKPOINT_VERSION: u32 = 1;

/// Run position recorded beside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Which training stage produced this checkpoint (e.g. `"stage1"`).
    pub stage: String,
    /// Completed iterations within that stage.
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetworkConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorInfo>,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes weights, optimizer state, and run position to `path`.
pub fn save_checkpoint(models: &Models, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let tensors: Vec<TensorInfo> = models
        .store
        .iter()
        .map(|(name, p)| TensorInfo {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    let header = CheckpointHeader {
        config: models.config.clone(),
        meta: meta.clone(),
        tensors,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ck_err(path, format!("header encoding: {e}")))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<std::fs::File>, bytes: &[u8]| -> Result<()> {
        out.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(&mut out, CHECKPOINT_MAGIC)?;
    write(&mut out, &CHECKPOINT_VERSION.to_le_bytes())?;
    write(&mut out, &(header_bytes.len() as u64).to_le_bytes())?;
    write(&mut out, &header_bytes)?;
    for (_, param) in models.store.iter() {
        for array in [&param.value, &param.m, &param.v] {
            for &x in array.iter() {
                write(&mut out, &x.to_le_bytes())?;
            }
        }
        write(&mut out, &param.steps.to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint back into a fresh [`Models`].
pub fn load_checkpoint(path: &Path) -> Result<(Models, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| ck_err(path, format!("reading magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck_err(path, "not a checkpoint file (bad magic)"));
    }
    let mut word = [0u8; 4];
    input
        .read_exact(&mut word)
        .map_err(|e| ck_err(path, format!("reading version: {e}")))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let mut len_bytes = [0u8; 8];
    input
        .read_exact(&mut len_bytes)
        .map_err(|e| ck_err(path, format!("reading header length: {e}")))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input
        .read_exact(&mut header_bytes)
        .map_err(|e| ck_err(path, format!("reading header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| ck_err(path, format!("decoding header: {e}")))?;
    let mut models = Models::new(header.config, 0)?;
    let expected: Vec<String> = models.store.names().map(str::to_string).collect();
    let stored: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != stored {
        return Err(ck_err(
            path,
            format!(
                "tensor set mismatch: file lists {} tensors, config implies {}",
                stored.len(),
                expected.len()
            ),
        ));
    }
    fn read_f64s(
        input: &mut impl Read,
        path: &Path,
        count: usize,
        shape: &[usize],
    ) -> Result<ArrayD<f64>> {
        let mut buf = vec![0u8; count * 8];
        input
            .read_exact(&mut buf)
            .map_err(|e| ck_err(path, format!("reading tensor payload: {e}")))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| ck_err(path, format!("tensor shape: {e}")))
    }
    for info in &header.tensors {
        let count: usize = info.shape.iter().product();
        let value = read_f64s(&mut input, path, count, &info.shape)?;
        let m = read_f64s(&mut input, path, count, &info.shape)?;
        let v = read_f64s(&mut input, path, count, &info.shape)?;
        let mut steps_bytes = [0u8; 8];
        input
            .read_exact(&mut steps_bytes)
            .map_err(|e| ck_err(path, format!("reading step count: {e}")))?;
        let registered = models.store.get_mut(&info.name)?;
        if registered.value.shape() != value.shape() {
            return Err(ck_err(
                path,
                format!(
                    "tensor {}: stored shape {:?} does not match config shape {:?}",
                    info.name,
                    value.shape(),
                    registered.value.shape()
                ),
            ));
        }
        registered.value = value;
        registered.m = m;
        registered.v = v;
        registered.steps = u64::from_le_bytes(steps_bytes);
    }
    let meta = header.meta;
    Ok((models, meta))
}

impl Models {
    /// Loads a checkpoint and verifies it was produced under `expected`
    /// configuration; refuses incompatible weights.
    pub fn load_compatible(
        path: &Path,
        expected: &NetworkConfig,
    ) -> Result<(Models, CheckpointMeta)> {
        let (models, meta) = load_checkpoint(path)?;
        if models.config() != expected {
            return Err(ck_err(
                path,
                "checkpoint configuration does not match the requested configuration",
            ));
        }
        Ok((models, meta))
    }
}

#[cfg(test)]
mod tests;
