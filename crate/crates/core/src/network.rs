//! Toy two-stream encoder-decoder.
//!
//! Both modalities run through one frozen backbone (patch embedding followed
//! by `layers` linear+GeLU blocks). After every block the modality's own
//! adapter is added residually. The two features are fused by addition and
//! a shared trainable decoder maps each of `F_R`, `F_T` and `F_R + F_T` back
//! to per-pixel logits.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{
    decoupled_adapter_graph, vanilla_adapter_graph, AdapterConfig, AdapterParams, DecoupledTrace,
    DecoupledVars,
};
use crate::autodiff::{bce_with_logit, in_group, GradientMap, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Tensor};

pub const GROUP_R: &str = "theta_R";
pub const GROUP_T: &str = "theta_T";
pub const GROUP_D: &str = "theta_D";
pub const BACKBONE: &str = "backbone";

/// Boundary emphasis factor of the pixel weights.
const BOUNDARY_WEIGHT: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    R,
    T,
}

impl Modality {
    pub fn group(self) -> &'static str {
        match self {
            Modality::R => GROUP_R,
            Modality::T => GROUP_T,
        }
    }
}

/// Trainable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    R,
    T,
    D,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::R, Group::T, Group::D];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::R => GROUP_R,
            Group::T => GROUP_T,
            Group::D => GROUP_D,
        }
    }
}

/// Supervised prediction streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    F,
    R,
    T,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::F, Stream::R, Stream::T];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    Vanilla,
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Feature channels.
    pub d: usize,
    /// Frozen backbone blocks, each followed by an adapter.
    pub layers: usize,
    pub decoder_hidden: usize,
    pub adapter_kind: AdapterKind,
    /// Adapter ratios; `adapter.d` always equals `d`.
    pub adapter: AdapterConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            height: 32,
            width: 32,
            patch: 4,
            d: 16,
            layers: 2,
            decoder_hidden: 32,
            adapter_kind: AdapterKind::Decoupled,
            adapter: AdapterConfig::with_dims(16, 8),
        }
    }
}

impl NetConfig {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_area(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        if self.d == 0 || self.layers == 0 || self.decoder_hidden == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if self.adapter.d != self.d {
            return Err(Error::invalid(format!(
                "adapter width {} differs from feature width {}",
                self.adapter.d, self.d
            )));
        }
        self.adapter.validate()
    }

    /// Image pixel index of every element of the `[tokens x patch_area]`
    /// token layout.
    fn patch_index(&self) -> Vec<usize> {
        let (p, w) = (self.patch, self.width);
        let cols = w / p;
        let mut index = Vec::with_capacity(self.height * w);
        for t in 0..self.tokens() {
            let (pr, pc) = (t / cols, t % cols);
            for i in 0..p {
                for j in 0..p {
                    index.push((pr * p + i) * w + pc * p + j);
                }
            }
        }
        index
    }

    /// Token-layout position of every image pixel.
    fn pixel_index(&self) -> Vec<usize> {
        let forward = self.patch_index();
        let mut inverse = vec![0; forward.len()];
        for (pos, &pix) in forward.iter().enumerate() {
            inverse[pix] = pos;
        }
        inverse
    }
}

/// One paired training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_r: Tensor,
    pub image_t: Tensor,
    pub gt: Tensor,
}

impl Sample {
    pub fn new(image_r: Tensor, image_t: Tensor, gt: Tensor) -> Result<Self> {
        let (h, w) = image_r.require_matrix("Sample")?;
        image_t.require_shape("Sample", &[h, w])?;
        gt.require_shape("Sample", &[h, w])?;
        if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("ground truth must be binary"));
        }
        Ok(Sample { image_r, image_t, gt })
    }

    pub fn height(&self) -> usize {
        self.gt.rows()
    }

    pub fn width(&self) -> usize {
        self.gt.cols()
    }

    /// The same scene with the two modalities exchanged.
    pub fn swapped(&self) -> Sample {
        Sample {
            image_r: self.image_t.clone(),
            image_t: self.image_r.clone(),
            gt: self.gt.clone(),
        }
    }
}

/// Model parameters: a frozen backbone and three trainable groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub backbone: ParamStore,
    pub trainable: ParamStore,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// Std of the adapter up-projections and gate weights at initialization.
const ADAPTER_UP_STD: f64 = 0.05;
/// Gain of the frozen backbone projections.
const BACKBONE_GAIN: f64 = 1.5;

impl ModelParams {
    /// Deterministic initialization from `seed`.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = ParamStore::new();
        for l in 0..config.layers {
            let fan_in = if l == 0 { config.patch_area() } else { config.d };
            let std = BACKBONE_GAIN / (fan_in as f64).sqrt();
            backbone.insert(format!("{BACKBONE}.layer{l}.W"), gaussian(&[fan_in, config.d], std, &mut rng));
            backbone.insert(format!("{BACKBONE}.layer{l}.b"), gaussian(&[config.d], 0.1, &mut rng));
        }

        let mut trainable = ParamStore::new();
        for modality in [Modality::R, Modality::T] {
            for l in 0..config.layers {
                let prefix = format!("{}.layer{l}", modality.group());
                match config.adapter_kind {
                    AdapterKind::Decoupled => {
                        AdapterParams::random(&config.adapter, ADAPTER_UP_STD, &mut rng)
                            .insert_into(&mut trainable, &prefix);
                    }
                    AdapterKind::Vanilla => {
                        let (d, h) = (config.d, config.adapter.d_hat);
                        let down_std = 1.0 / (d as f64).sqrt();
                        trainable.insert(format!("{prefix}.W_down"), gaussian(&[d, h], down_std, &mut rng));
                        trainable.insert(format!("{prefix}.W_up"), gaussian(&[h, d], ADAPTER_UP_STD, &mut rng));
                    }
                }
            }
        }
        let (d, hid, out) = (config.d, config.decoder_hidden, config.patch_area());
        trainable.insert(format!("{GROUP_D}.W1"), gaussian(&[d, hid], 1.0 / (d as f64).sqrt(), &mut rng));
        trainable.insert(format!("{GROUP_D}.b1"), Tensor::zeros(&[hid]));
        trainable.insert(format!("{GROUP_D}.W2"), gaussian(&[hid, out], 1.0 / (hid as f64).sqrt(), &mut rng));
        trainable.insert(format!("{GROUP_D}.b2"), Tensor::zeros(&[out]));
        Ok(ModelParams {
            config,
            backbone,
            trainable,
        })
    }

    /// Same model with the trainable parameters replaced.
    pub fn with_trainable(&self, trainable: ParamStore) -> ModelParams {
        ModelParams {
            config: self.config,
            backbone: self.backbone.clone(),
            trainable,
        }
    }

    /// Parameter count of a trainable group.
    pub fn group_len(&self, group: Group) -> usize {
        self.trainable
            .iter()
            .filter(|(path, _)| in_group(path, group.prefix()))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Flattened parameters of a group, in path order.
    pub fn group_vector(&self, group: Group) -> Vec<f64> {
        self.trainable
            .iter()
            .filter(|(path, _)| in_group(path, group.prefix()))
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Adds `delta` (flattened in path order) to a group.
    pub fn add_to_group(&mut self, group: Group, delta: &[f64]) -> Result<()> {
        if delta.len() != self.group_len(group) {
            return Err(Error::ShapeMismatch {
                op: "add_to_group",
                expected: vec![self.group_len(group)],
                got: vec![delta.len()],
            });
        }
        let mut offset = 0;
        for (path, t) in self.trainable.iter_mut() {
            if !in_group(path, group.prefix()) {
                continue;
            }
            let n = t.len();
            for (v, dv) in t.data_mut().iter_mut().zip(&delta[offset..offset + n]) {
                *v += dv;
            }
            offset += n;
        }
        Ok(())
    }

    /// Model with the two modality stacks exchanged.
    pub fn swapped_modalities(&self) -> ModelParams {
        let trainable = self
            .trainable
            .iter()
            .map(|(path, t)| {
                let renamed = if in_group(path, GROUP_R) {
                    format!("{GROUP_T}{}", &path[GROUP_R.len()..])
                } else if in_group(path, GROUP_T) {
                    format!("{GROUP_R}{}", &path[GROUP_T.len()..])
                } else {
                    path.clone()
                };
                (renamed, t.clone())
            })
            .collect();
        self.with_trainable(trainable)
    }

    /// Checks that the parameter set matches the configured architecture.
    pub fn check_structure(&self) -> Result<()> {
        let reference = ModelParams::init(self.config, 0)?;
        for (mine, theirs, what) in [
            (&self.backbone, &reference.backbone, "backbone"),
            (&self.trainable, &reference.trainable, "trainable"),
        ] {
            if mine.len() != theirs.len() {
                return Err(Error::invalid(format!(
                    "{what} has {} tensors, architecture needs {}",
                    mine.len(),
                    theirs.len()
                )));
            }
            for (path, t) in theirs {
                let got = mine.get(path).ok_or_else(|| Error::UnknownParameter(path.clone()))?;
                got.require_shape("check_structure", t.shape())?;
            }
        }
        Ok(())
    }
}

/// Pixel logits of the three streams plus the two encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutputs {
    pub p_r: Tensor,
    pub p_t: Tensor,
    pub p_f: Tensor,
    pub f_r: Tensor,
    pub f_t: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub total: f64,
    pub fusion: f64,
    pub r: f64,
    pub t: f64,
}

impl Losses {
    pub fn stream(&self, s: Stream) -> f64 {
        match s {
            Stream::F => self.fusion,
            Stream::R => self.r,
            Stream::T => self.t,
        }
    }
}

/// A recorded forward pass over one sample with all three stream losses.
pub struct ForwardGraph {
    pub graph: Graph,
    pub f_r: Var,
    pub f_t: Var,
    pub p_r: Var,
    pub p_t: Var,
    pub p_f: Var,
    pub loss_f: Var,
    pub loss_r: Var,
    pub loss_t: Var,
    pub loss_total: Var,
    pub adapter_traces: Vec<(Modality, DecoupledTrace)>,
    adapter: AdapterConfig,
}

impl ForwardGraph {
    pub fn loss_var(&self, stream: Stream) -> Var {
        match stream {
            Stream::F => self.loss_f,
            Stream::R => self.loss_r,
            Stream::T => self.loss_t,
        }
    }

    pub fn losses(&self) -> Losses {
        let v = |x: Var| self.graph.value(x).data()[0];
        Losses {
            total: v(self.loss_total),
            fusion: v(self.loss_f),
            r: v(self.loss_r),
            t: v(self.loss_t),
        }
    }

    pub fn backward(&self, stream: Stream) -> Result<GradientMap> {
        self.graph.backward(self.loss_var(stream))
    }

    pub fn outputs(&self) -> StreamOutputs {
        let v = |x: Var| self.graph.value(x).clone();
        StreamOutputs {
            p_r: v(self.p_r),
            p_t: v(self.p_t),
            p_f: v(self.p_f),
            f_r: v(self.f_r),
            f_t: v(self.f_t),
        }
    }

    /// Smallest distance of any TopK selection or budget floor from a
    /// decision boundary. Small values mean a tiny parameter change could
    /// flip a mask, where the loss is not differentiable.
    pub fn tie_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let cfg = &self.adapter;
        for (_, trace) in &self.adapter_traces {
            for (gate, alpha) in [(trace.g_for, cfg.alpha_for), (trace.g_back, cfg.alpha_back)] {
                let raw = cfg.d_hat as f64 * (alpha + cfg.beta * gate);
                margin = margin.min((raw - raw.round()).abs());
            }
            for (act, k, largest) in [
                (trace.act_for, trace.p_for, true),
                (trace.act_back, trace.p_back, false),
            ] {
                let t = self.graph.value(act);
                let n = t.cols();
                if k == 0 || k == n {
                    continue;
                }
                // Only the gap between the last kept and first dropped value matters.
                let split = if largest { n - k } else { k };
                for row in t.data().chunks(n) {
                    let mut sorted = row.to_vec();
                    sorted.sort_by(f64::total_cmp);
                    margin = margin.min(sorted[split] - sorted[split - 1]);
                }
            }
        }
        margin
    }
}

/// Registers every trainable tensor and returns the path lookup.
fn register_trainable(g: &mut Graph, model: &ModelParams) -> Result<HashMap<String, Var>> {
    let mut vars = HashMap::with_capacity(model.trainable.len());
    for (path, t) in &model.trainable {
        vars.insert(path.clone(), g.param(path.clone(), t.clone())?);
    }
    Ok(vars)
}

fn lookup(vars: &HashMap<String, Var>, path: &str) -> Result<Var> {
    vars.get(path).copied().ok_or_else(|| Error::UnknownParameter(path.to_string()))
}

fn backbone_tensor<'a>(model: &'a ModelParams, path: &str) -> Result<&'a Tensor> {
    model.backbone.get(path).ok_or_else(|| Error::UnknownParameter(path.to_string()))
}

/// Image as a `[tokens x patch_area]` constant.
fn tokenize(image: &Tensor, cfg: &NetConfig) -> Result<Tensor> {
    image.require_shape("encode", &[cfg.height, cfg.width])?;
    let data = cfg.patch_index().iter().map(|&i| image.data()[i]).collect();
    Ok(Tensor::from_raw(vec![cfg.tokens(), cfg.patch_area()], data))
}

fn encode_graph(
    g: &mut Graph,
    image: &Tensor,
    model: &ModelParams,
    vars: &HashMap<String, Var>,
    modality: Modality,
    traces: &mut Vec<(Modality, DecoupledTrace)>,
) -> Result<Var> {
    let cfg = &model.config;
    let mut x = g.constant(tokenize(image, cfg)?);
    for l in 0..cfg.layers {
        let w = g.constant(backbone_tensor(model, &format!("{BACKBONE}.layer{l}.W"))?.clone());
        let b = g.constant(backbone_tensor(model, &format!("{BACKBONE}.layer{l}.b"))?.clone());
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        x = g.gelu(z)?;

        let prefix = format!("{}.layer{l}", modality.group());
        let adapted = match cfg.adapter_kind {
            AdapterKind::Vanilla => {
                let down = lookup(vars, &format!("{prefix}.W_down"))?;
                let up = lookup(vars, &format!("{prefix}.W_up"))?;
                vanilla_adapter_graph(g, x, down, up)?
            }
            AdapterKind::Decoupled => {
                let dv = DecoupledVars {
                    w_down_for: lookup(vars, &format!("{prefix}.W_down_for"))?,
                    w_down_back: lookup(vars, &format!("{prefix}.W_down_back"))?,
                    w_up_for: lookup(vars, &format!("{prefix}.W_up_for"))?,
                    w_up_back: lookup(vars, &format!("{prefix}.W_up_back"))?,
                    gate_a: lookup(vars, &format!("{prefix}.gate_A"))?,
                    gate_b: lookup(vars, &format!("{prefix}.gate_b"))?,
                };
                let trace = decoupled_adapter_graph(g, x, &dv, &cfg.adapter)?;
                let out = trace.output;
                traces.push((modality, trace));
                out
            }
        };
        x = g.add(x, adapted)?;
    }
    Ok(x)
}

struct DecoderVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

fn decoder_vars(vars: &HashMap<String, Var>) -> Result<DecoderVars> {
    Ok(DecoderVars {
        w1: lookup(vars, &format!("{GROUP_D}.W1"))?,
        b1: lookup(vars, &format!("{GROUP_D}.b1"))?,
        w2: lookup(vars, &format!("{GROUP_D}.W2"))?,
        b2: lookup(vars, &format!("{GROUP_D}.b2"))?,
    })
}

fn decode_graph(g: &mut Graph, feature: Var, dec: &DecoderVars, cfg: &NetConfig) -> Result<Var> {
    let f = g.value(feature);
    f.require_shape("decode", &[cfg.tokens(), cfg.d])?;
    let h = g.matmul(feature, dec.w1)?;
    let h = g.add_row(h, dec.b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, dec.w2)?;
    let o = g.add_row(o, dec.b2)?;
    g.gather(o, cfg.pixel_index(), vec![cfg.height, cfg.width])
}

fn stream_loss_graph(g: &mut Graph, logits: Var, gt: &Tensor, w: &Tensor) -> Result<Var> {
    let iou = g.weighted_iou(logits, gt, w)?;
    let bce = g.weighted_bce(logits, gt, w)?;
    g.add(iou, bce)
}

/// Records the full three-stream forward pass and its losses.
pub fn build_forward(model: &ModelParams, sample: &Sample) -> Result<ForwardGraph> {
    let cfg = &model.config;
    sample.gt.require_shape("forward_all", &[cfg.height, cfg.width])?;
    let mut g = Graph::new();
    let vars = register_trainable(&mut g, model)?;
    let mut traces = Vec::new();
    let f_r = encode_graph(&mut g, &sample.image_r, model, &vars, Modality::R, &mut traces)?;
    let f_t = encode_graph(&mut g, &sample.image_t, model, &vars, Modality::T, &mut traces)?;
    let dec = decoder_vars(&vars)?;
    let p_r = decode_graph(&mut g, f_r, &dec, cfg)?;
    let p_t = decode_graph(&mut g, f_t, &dec, cfg)?;
    let fused = g.add(f_r, f_t)?;
    let p_f = decode_graph(&mut g, fused, &dec, cfg)?;

    let w = pixel_weights(&sample.gt);
    let loss_f = stream_loss_graph(&mut g, p_f, &sample.gt, &w)?;
    let loss_r = stream_loss_graph(&mut g, p_r, &sample.gt, &w)?;
    let loss_t = stream_loss_graph(&mut g, p_t, &sample.gt, &w)?;
    let partial = g.add(loss_f, loss_r)?;
    let loss_total = g.add(partial, loss_t)?;
    Ok(ForwardGraph {
        graph: g,
        f_r,
        f_t,
        p_r,
        p_t,
        p_f,
        loss_f,
        loss_r,
        loss_t,
        loss_total,
        adapter_traces: traces,
        adapter: cfg.adapter,
    })
}

/// Encoder feature `[tokens x d]` of one modality.
pub fn encode(image: &Tensor, model: &ModelParams, modality: Modality) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = register_trainable(&mut g, model)?;
    let out = encode_graph(&mut g, image, model, &vars, modality, &mut Vec::new())?;
    Ok(g.value(out).clone())
}

/// Decoder logits `[H x W]` for a `[tokens x d]` feature.
pub fn decode(feature: &Tensor, model: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = register_trainable(&mut g, model)?;
    let f = g.constant(feature.clone());
    let out = decode_graph(&mut g, f, &decoder_vars(&vars)?, &model.config)?;
    Ok(g.value(out).clone())
}

/// Decodes given encoder features into the three streams.
pub fn forward_from_features(f_r: &Tensor, f_t: &Tensor, model: &ModelParams) -> Result<StreamOutputs> {
    f_t.require_shape("forward_from_features", f_r.shape())?;
    let fused = Tensor::from_raw(
        f_r.shape().to_vec(),
        f_r.data().iter().zip(f_t.data()).map(|(a, b)| a + b).collect(),
    );
    Ok(StreamOutputs {
        p_r: decode(f_r, model)?,
        p_t: decode(f_t, model)?,
        p_f: decode(&fused, model)?,
        f_r: f_r.clone(),
        f_t: f_t.clone(),
    })
}

pub fn forward_all(sample: &Sample, model: &ModelParams) -> Result<StreamOutputs> {
    Ok(build_forward(model, sample)?.outputs())
}

/// Box-filter window for an image of height `h`: `h / 8` rounded up to odd,
/// at least 3.
pub fn weight_window(h: usize) -> usize {
    let k = h / 8;
    let k = if k.is_multiple_of(2) { k + 1 } else { k };
    k.max(3)
}

/// Boundary-emphasizing pixel weights `1 + 5 |boxmean(GT) - GT|`.
///
/// The box mean averages over the in-bounds part of the window, so a
/// constant mask gets weight 1 everywhere including the border.
pub fn pixel_weights(gt: &Tensor) -> Tensor {
    let (h, w) = (gt.rows(), gt.cols());
    let r = (weight_window(h) / 2) as isize;
    // Summed-area table with a zero first row and column.
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        for j in 0..w {
            sat[(i + 1) * (w + 1) + j + 1] = gt.data()[i * w + j] + sat[i * (w + 1) + j + 1]
                + sat[(i + 1) * (w + 1) + j]
                - sat[i * (w + 1) + j];
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let r0 = (i as isize - r).max(0) as usize;
        let r1 = ((i as isize + r) as usize).min(h - 1) + 1;
        for j in 0..w {
            let c0 = (j as isize - r).max(0) as usize;
            let c1 = ((j as isize + r) as usize).min(w - 1) + 1;
            let total = sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0]
                + sat[r0 * (w + 1) + c0];
            let mean = total / ((r1 - r0) * (c1 - c0)) as f64;
            out[i * w + j] = 1.0 + BOUNDARY_WEIGHT * (mean - gt.data()[i * w + j]).abs();
        }
    }
    Tensor::from_raw(vec![h, w], out)
}

pub fn weighted_bce(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Result<f64> {
    gt.require_shape("weighted_bce", logits.shape())?;
    w.require_shape("weighted_bce", logits.shape())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&x, &t), &wv) in logits.data().iter().zip(gt.data()).zip(w.data()) {
        num += wv * bce_with_logit(x, t);
        den += wv;
    }
    Ok(num / den)
}

pub fn weighted_iou(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Result<f64> {
    gt.require_shape("weighted_iou", logits.shape())?;
    w.require_shape("weighted_iou", logits.shape())?;
    let mut inter = 1.0;
    let mut union = 1.0;
    for ((&x, &t), &wv) in logits.data().iter().zip(gt.data()).zip(w.data()) {
        let p = sigmoid_scalar(x);
        inter += wv * p * t;
        union += wv * (p + t - p * t);
    }
    Ok(1.0 - inter / union)
}

/// Weighted IoU plus weighted BCE, both with the weights of `gt`.
pub fn stream_loss(logits: &Tensor, gt: &Tensor) -> Result<f64> {
    let w = pixel_weights(gt);
    Ok(weighted_iou(logits, gt, &w)? + weighted_bce(logits, gt, &w)?)
}

pub fn total_loss(outputs: &StreamOutputs, gt: &Tensor) -> Result<Losses> {
    let fusion = stream_loss(&outputs.p_f, gt)?;
    let r = stream_loss(&outputs.p_r, gt)?;
    let t = stream_loss(&outputs.p_t, gt)?;
    Ok(Losses {
        total: fusion + r + t,
        fusion,
        r,
        t,
    })
}

/// Mean of the three sigmoid maps.
pub fn final_prediction(p_r: &Tensor, p_t: &Tensor, p_f: &Tensor) -> Result<Tensor> {
    p_t.require_shape("final_prediction", p_r.shape())?;
    p_f.require_shape("final_prediction", p_r.shape())?;
    let data = p_r
        .data()
        .iter()
        .zip(p_t.data())
        .zip(p_f.data())
        .map(|((&a, &b), &c)| (sigmoid_scalar(a) + sigmoid_scalar(b) + sigmoid_scalar(c)) / 3.0)
        .collect();
    Tensor::new(p_r.shape().to_vec(), data)
}
