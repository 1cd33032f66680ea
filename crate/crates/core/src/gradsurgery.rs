//! Per-group gradient decomposition by loss stream, projection-based
//! deconfliction, and the SGD training step.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::datakit::metrics::{mae, max_f_measure};
use crate::error::{Error, Result};
use crate::network::{build_forward, final_prediction, Group, Losses, ModelParams, Sample, Stream};

/// Whether `stream`'s loss reaches `group` at all. The unimodal R loss never
/// touches the T encoder and vice versa.
pub fn stream_reaches(stream: Stream, group: Group) -> bool {
    !matches!((stream, group), (Stream::R, Group::T) | (Stream::T, Group::R))
}

/// Flattened gradients keyed by (loss stream, parameter group).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    entries: BTreeMap<(Stream, Group), Vec<f64>>,
}

impl GradientSet {
    pub fn new() -> Self {
        GradientSet::default()
    }

    pub fn insert(&mut self, stream: Stream, group: Group, grad: Vec<f64>) -> Result<()> {
        if !stream_reaches(stream, group) {
            return Err(Error::invalid(format!(
                "stream {stream:?} has no gradient on group {group:?}"
            )));
        }
        self.entries.insert((stream, group), grad);
        Ok(())
    }

    pub fn get(&self, stream: Stream, group: Group) -> Option<&[f64]> {
        self.entries.get(&(stream, group)).map(Vec::as_slice)
    }

    fn require(&self, stream: Stream, group: Group) -> Result<&[f64]> {
        self.get(stream, group).ok_or_else(|| {
            Error::invalid(format!("gradient set lacks ({stream:?}, {group:?})"))
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = (Stream, Group)> + '_ {
        self.entries.keys().copied()
    }

    pub fn is_complete(&self) -> bool {
        Stream::ALL.iter().all(|&s| {
            Group::ALL
                .iter()
                .all(|&g| self.entries.contains_key(&(s, g)) == stream_reaches(s, g))
        })
    }

    /// Sum over streams of one group's gradients.
    pub fn group_total(&self, group: Group, streams: &[Stream]) -> Result<Vec<f64>> {
        let mut total: Option<Vec<f64>> = None;
        for &s in streams.iter().filter(|&&s| stream_reaches(s, group)) {
            let g = self.require(s, group)?;
            match &mut total {
                Some(t) => t.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => total = Some(g.to_vec()),
            }
        }
        total.ok_or_else(|| Error::invalid(format!("no stream reaches {group:?}")))
    }

    fn accumulate(&mut self, other: &GradientSet) {
        for (key, g) in &other.entries {
            match self.entries.get_mut(key) {
                Some(mine) => mine.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.entries.insert(*key, g.clone());
                }
            }
        }
    }

    fn scale(&mut self, c: f64) {
        for g in self.entries.values_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Gradients of the three stream losses of one sample, each from its own
/// backward pass, split by parameter group.
pub fn grouped_gradients(sample: &Sample, model: &ModelParams) -> Result<GradientSet> {
    Ok(sample_pass(sample, model)?.grads)
}

struct SamplePass {
    grads: GradientSet,
    losses: Losses,
    mae: f64,
    max_f: f64,
}

fn sample_pass(sample: &Sample, model: &ModelParams) -> Result<SamplePass> {
    let fwd = build_forward(model, sample)?;
    let mut grads = GradientSet::new();
    for stream in Stream::ALL {
        let map = fwd.backward(stream)?;
        for group in Group::ALL.into_iter().filter(|&g| stream_reaches(stream, g)) {
            grads.insert(stream, group, map.flatten_group(group.prefix()))?;
        }
    }
    let out = fwd.outputs();
    let pred = final_prediction(&out.p_r, &out.p_t, &out.p_f)?;
    let max_f = if sample.gt.data().iter().any(|&v| v > 0.5) {
        max_f_measure(&pred, &sample.gt)?
    } else {
        0.0
    };
    Ok(SamplePass {
        grads,
        losses: fwd.losses(),
        mae: mae(&pred, &sample.gt)?,
        max_f,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
///
/// Panics if the lengths differ.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity length mismatch");
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// `g - (g . onto / |onto|^2) onto`.
pub fn project_out(g: &[f64], onto: &[f64]) -> Result<Vec<f64>> {
    if g.len() != onto.len() {
        return Err(Error::ShapeMismatch {
            op: "project_out",
            expected: vec![onto.len()],
            got: vec![g.len()],
        });
    }
    let nn = dot(onto, onto);
    if nn == 0.0 {
        return Err(Error::invalid("cannot project onto a zero vector"));
    }
    let c = dot(g, onto) / nn;
    Ok(g.iter().zip(onto).map(|(x, o)| x - c * o).collect())
}

/// Order in which each gradient visits the others during deconfliction.
pub enum ProjectionOrder<'a, R: Rng> {
    /// `j = 0, 1, ...` skipping `i`.
    Ascending,
    /// A fresh random permutation for every `i`.
    Shuffled(&'a mut R),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Deconflicted {
    /// Mean of the adjusted gradients.
    pub combined: Vec<f64>,
    /// Each gradient after all of its projections.
    pub components: Vec<Vec<f64>>,
    /// Number of projections applied.
    pub projections: usize,
}

/// Deconflicts `grads` and averages the results.
///
/// Each `G_i` starts as its own current value and, for every other `j`,
/// has its projection on the original `G_j` removed whenever the cosine
/// between the current value and `G_j` is negative.
pub fn grad_deconflict(grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(deconflict_with::<rand::rngs::ThreadRng>(grads, ProjectionOrder::Ascending)?.combined)
}

pub fn deconflict_with<R: Rng>(
    grads: &[Vec<f64>],
    mut order: ProjectionOrder<'_, R>,
) -> Result<Deconflicted> {
    let n = grads.len();
    let Some(first) = grads.first() else {
        return Err(Error::invalid("grad_deconflict needs at least one gradient"));
    };
    let len = first.len();
    if let Some(bad) = grads.iter().find(|g| g.len() != len) {
        return Err(Error::ShapeMismatch {
            op: "grad_deconflict",
            expected: vec![len],
            got: vec![bad.len()],
        });
    }
    let mut components = Vec::with_capacity(n);
    let mut projections = 0;
    for i in 0..n {
        let mut current = grads[i].clone();
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        if let ProjectionOrder::Shuffled(rng) = &mut order {
            others.shuffle(*rng);
        }
        for j in others {
            if cosine_similarity(&current, &grads[j]) < 0.0 {
                current = project_out(&current, &grads[j])?;
                projections += 1;
            }
        }
        components.push(current);
    }
    let mut combined = vec![0.0; len];
    for c in &components {
        combined.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    combined.iter_mut().for_each(|v| *v /= n as f64);
    Ok(Deconflicted {
        combined,
        components,
        projections,
    })
}

/// Deconflicted updates of the three groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupUpdates {
    pub r: Deconflicted,
    pub t: Deconflicted,
    pub d: Deconflicted,
}

impl GroupUpdates {
    pub fn projections(&self) -> usize {
        self.r.projections + self.t.projections + self.d.projections
    }
}

/// Encoders deconflict (unimodal, fusion); the decoder deconflicts (R, T, F).
pub fn deconflict_all<R: Rng>(gs: &GradientSet, rng: Option<&mut R>) -> Result<GroupUpdates> {
    if !gs.is_complete() {
        return Err(Error::invalid("deconflict_all needs a complete gradient set"));
    }
    let list = |pairs: &[(Stream, Group)]| -> Result<Vec<Vec<f64>>> {
        pairs.iter().map(|&(s, g)| gs.require(s, g).map(<[f64]>::to_vec)).collect()
    };
    let enc_r = list(&[(Stream::R, Group::R), (Stream::F, Group::R)])?;
    let enc_t = list(&[(Stream::T, Group::T), (Stream::F, Group::T)])?;
    let dec = list(&[(Stream::R, Group::D), (Stream::T, Group::D), (Stream::F, Group::D)])?;
    match rng {
        Some(rng) => Ok(GroupUpdates {
            r: deconflict_with(&enc_r, ProjectionOrder::Shuffled(rng))?,
            t: deconflict_with(&enc_t, ProjectionOrder::Shuffled(rng))?,
            d: deconflict_with(&dec, ProjectionOrder::Shuffled(rng))?,
        }),
        None => Ok(GroupUpdates {
            r: deconflict_with::<R>(&enc_r, ProjectionOrder::Ascending)?,
            t: deconflict_with::<R>(&enc_t, ProjectionOrder::Ascending)?,
            d: deconflict_with::<R>(&dec, ProjectionOrder::Ascending)?,
        }),
    }
}

/// `theta <- theta - eta * G` for each trainable group. The backbone is
/// never touched.
pub fn sgd_update(
    model: &mut ModelParams,
    g_r: &[f64],
    g_t: &[f64],
    g_d: &[f64],
    eta: f64,
) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {eta}")));
    }
    for (group, g) in [(Group::R, g_r), (Group::T, g_t), (Group::D, g_d)] {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sgd_update"));
        }
        let delta: Vec<f64> = g.iter().map(|v| -eta * v).collect();
        model.add_to_group(group, &delta)?;
    }
    Ok(())
}

/// Which mechanisms a training step applies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    /// Train on `L_F + L_R + L_T` instead of `L_F` alone.
    pub unimodal: bool,
    /// Deconflict per group instead of summing stream gradients. Only
    /// meaningful with `unimodal`.
    pub deconflict: bool,
    pub eta: f64,
    pub shuffle_projections: bool,
}

/// Diagnostics of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Batch-mean losses before the update.
    pub losses: Losses,
    /// `|G_R| / |G_T|` of the total encoder gradients before deconfliction.
    pub grad_ratio: f64,
    pub cos_rt: f64,
    pub cos_rf: f64,
    pub cos_tf: f64,
    /// Projections applied across all groups.
    pub conflicts: usize,
    /// Smallest cosine between the applied decoder update and any of the
    /// components it was combined from.
    pub decoder_alignment: f64,
    /// Batch-mean metrics of the final prediction before the update.
    pub mae: f64,
    pub max_f: f64,
}

/// Batch-mean gradient set with batch-mean losses and metrics.
pub fn batch_gradients(batch: &[Sample], model: &ModelParams) -> Result<(GradientSet, Losses, f64, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }
    let passes: Vec<SamplePass> = batch
        .par_iter()
        .map(|s| sample_pass(s, model))
        .collect::<Result<_>>()?;
    let n = passes.len() as f64;
    let mut grads = GradientSet::new();
    let mut losses = Losses {
        total: 0.0,
        fusion: 0.0,
        r: 0.0,
        t: 0.0,
    };
    let (mut mae_sum, mut f_sum) = (0.0, 0.0);
    for p in &passes {
        grads.accumulate(&p.grads);
        losses.total += p.losses.total / n;
        losses.fusion += p.losses.fusion / n;
        losses.r += p.losses.r / n;
        losses.t += p.losses.t / n;
        mae_sum += p.mae;
        f_sum += p.max_f;
    }
    grads.scale(1.0 / n);
    Ok((grads, losses, mae_sum / n, f_sum / n))
}

fn min_alignment(update: &[f64], components: &[Vec<f64>]) -> f64 {
    components
        .iter()
        .map(|c| cosine_similarity(update, c))
        .fold(f64::INFINITY, f64::min)
}

/// One optimization step on `batch`: forward, per-stream backward,
/// batch averaging, optional deconfliction, SGD update.
pub fn training_step<R: Rng>(
    batch: &[Sample],
    model: &mut ModelParams,
    cfg: &StepConfig,
    rng: &mut R,
) -> Result<StepReport> {
    let (gs, losses, mae, max_f) = batch_gradients(batch, model)?;
    let streams: &[Stream] = if cfg.unimodal {
        &Stream::ALL
    } else {
        &[Stream::F]
    };
    let total_r = gs.group_total(Group::R, streams)?;
    let total_t = gs.group_total(Group::T, streams)?;
    let norm_t = norm(&total_t);
    let grad_ratio = if norm_t > 0.0 {
        norm(&total_r) / norm_t
    } else {
        f64::NAN
    };
    let (dr, dt, df) = (
        gs.require(Stream::R, Group::D)?,
        gs.require(Stream::T, Group::D)?,
        gs.require(Stream::F, Group::D)?,
    );
    let (cos_rt, cos_rf, cos_tf) = (
        cosine_similarity(dr, dt),
        cosine_similarity(dr, df),
        cosine_similarity(dt, df),
    );

    let (update_r, update_t, update_d, components, conflicts) = if cfg.unimodal && cfg.deconflict {
        let updates = if cfg.shuffle_projections {
            deconflict_all(&gs, Some(rng))?
        } else {
            deconflict_all::<R>(&gs, None)?
        };
        let conflicts = updates.projections();
        (
            updates.r.combined,
            updates.t.combined,
            updates.d.combined,
            updates.d.components,
            conflicts,
        )
    } else {
        let total_d = gs.group_total(Group::D, streams)?;
        let components = streams
            .iter()
            .map(|&s| gs.require(s, Group::D).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        (total_r, total_t, total_d, components, 0)
    };
    let decoder_alignment = min_alignment(&update_d, &components);
    sgd_update(model, &update_r, &update_t, &update_d, cfg.eta)?;
    Ok(StepReport {
        losses,
        grad_ratio,
        cos_rt,
        cos_rf,
        cos_tf,
        conflicts,
        decoder_alignment,
        mae,
        max_f,
    })
}
