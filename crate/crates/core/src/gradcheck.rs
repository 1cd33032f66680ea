//! Finite-difference checks of the network gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{finite_diff_gradient, in_group, GradientMap, ParamStore};
use crate::datakit::synth::{generate_sample, SynthConfig};
use crate::error::{Error, Result};
use crate::gradsurgery::{norm, stream_reaches};
use crate::adapters::AdapterConfig;
use crate::network::{build_forward, AdapterKind, Group, ModelParams, NetConfig, Sample, Stream};

/// Points whose tie margin is below this are redrawn.
pub const MIN_TIE_MARGIN: f64 = 1e-3;
const MAX_DRAWS_PER_POINT: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub points: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Corrupts one analytic gradient entry so the check must fail.
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            points: 20,
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            inject_fault: false,
        }
    }
}

/// Architecture used for the check: small enough that finite differences
/// over every parameter stay cheap, with non-trivial TopK budgets.
pub fn check_net(kind: AdapterKind) -> NetConfig {
    NetConfig {
        height: 8,
        width: 8,
        patch: 4,
        d: 8,
        layers: 2,
        decoder_hidden: 6,
        adapter_kind: kind,
        adapter: AdapterConfig::with_dims(8, 4),
    }
}

/// Largest relative error for one (point, stream, group) comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub point: usize,
    pub kind: AdapterKind,
    pub stream: Stream,
    pub group: Group,
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||).
    pub rel_error: f64,
    /// Parameter tensor with the largest absolute discrepancy.
    pub worst_path: String,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub entries: Vec<CheckEntry>,
    /// Points that were redrawn because a mask was too close to a tie.
    pub redrawn: usize,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&CheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty()
            && self
                .entries
                .iter()
                .all(|e| e.rel_error < self.config.tolerance)
    }
}

/// Relative error of two gradient vectors; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Random model and sample for one check point. Every trainable parameter
/// is redrawn at unit-ish scale so gates move away from 1/2 and adapter
/// paths carry real signal.
pub fn random_point(kind: AdapterKind, seed: u64) -> Result<(ModelParams, Sample)> {
    let config = check_net(kind);
    let mut model = ModelParams::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for (path, t) in model.trainable.iter_mut() {
        let std = if path.ends_with("gate_b") || path.ends_with("gate_A") {
            1.0
        } else {
            0.5 / (t.shape()[0] as f64).sqrt()
        };
        for v in t.data_mut() {
            *v = std * normal.sample(&mut rng);
        }
    }
    let synth = SynthConfig {
        height: config.height,
        width: config.width,
        seed,
        ..SynthConfig::default()
    };
    let sample = generate_sample(&synth, &mut rng)?;
    Ok((model, sample))
}

fn stream_loss_fn<'a>(
    model: &'a ModelParams,
    sample: &Sample,
    stream: Stream,
) -> impl FnMut(&ParamStore) -> Result<f64> + 'a {
    let sample = sample.clone();
    move |params: &ParamStore| {
        let m = model.with_trainable(params.clone());
        Ok(build_forward(&m, &sample)?.losses().stream(stream))
    }
}

fn flatten(map: &GradientMap, group: Group) -> Vec<f64> {
    map.flatten_group(group.prefix())
}

/// Compares analytic and numeric gradients of every stream and group at
/// one point.
pub fn check_point(
    model: &ModelParams,
    sample: &Sample,
    eps: f64,
    point: usize,
    inject_fault: bool,
) -> Result<Vec<CheckEntry>> {
    let fwd = build_forward(model, sample)?;
    let mut entries = Vec::new();
    for stream in Stream::ALL {
        let mut analytic = fwd.backward(stream)?;
        if inject_fault {
            if let Some(t) = analytic.get_mut("theta_D.b2") {
                let v = &mut t.data_mut()[0];
                *v += 1e-2 * (1.0 + v.abs());
            }
        }
        let numeric = finite_diff_gradient(stream_loss_fn(model, sample, stream), &model.trainable, eps)?;
        for group in Group::ALL.into_iter().filter(|&g| stream_reaches(stream, g)) {
            let rel_error = relative_error(&flatten(&analytic, group), &flatten(&numeric, group));
            let worst_path = analytic
                .iter()
                .filter(|(p, _)| in_group(p, group.prefix()))
                .map(|(p, a)| {
                    let n = numeric.get(p).expect("same parameter set");
                    let gap = a
                        .data()
                        .iter()
                        .zip(n.data())
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                    (p.clone(), gap)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(p, _)| p)
                .unwrap_or_default();
            entries.push(CheckEntry {
                point,
                kind: model.config.adapter_kind,
                stream,
                group,
                rel_error,
                worst_path,
            });
        }
    }
    Ok(entries)
}

/// Runs the check at `config.points` random points, alternating decoupled
/// and vanilla adapters.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(config.eps > 0.0 && config.eps.is_finite()) {
        return Err(Error::invalid(format!("--eps must be positive, got {}", config.eps)));
    }
    if config.points == 0 {
        return Err(Error::invalid("gradcheck needs at least one point"));
    }
    let mut entries = Vec::new();
    let mut redrawn = 0;
    let mut next_seed = config.seed;
    for point in 0..config.points {
        let kind = if point % 2 == 0 {
            AdapterKind::Decoupled
        } else {
            AdapterKind::Vanilla
        };
        let mut accepted = None;
        for _ in 0..MAX_DRAWS_PER_POINT {
            let (model, sample) = random_point(kind, next_seed)?;
            next_seed += 1;
            if build_forward(&model, &sample)?.tie_margin() >= MIN_TIE_MARGIN {
                accepted = Some((model, sample));
                break;
            }
            redrawn += 1;
        }
        let (model, sample) = accepted
            .ok_or_else(|| Error::invalid("could not draw a point away from mask ties"))?;
        entries.extend(check_point(&model, &sample, config.eps, point, config.inject_fault)?);
    }
    Ok(GradcheckReport {
        config: *config,
        entries,
        redrawn,
    })
}

/// Largest gap, over groups, between the sum of per-stream gradients and
/// the gradient of the summed loss.
pub fn decomposition_gap(model: &ModelParams, sample: &Sample) -> Result<f64> {
    let fwd = build_forward(model, sample)?;
    let total = fwd.graph.backward(fwd.loss_total)?;
    let streams = Stream::ALL
        .iter()
        .map(|&s| fwd.backward(s))
        .collect::<Result<Vec<_>>>()?;
    let mut gap: f64 = 0.0;
    for group in Group::ALL {
        let want = flatten(&total, group);
        let mut sum = vec![0.0; want.len()];
        for map in &streams {
            for (acc, v) in sum.iter_mut().zip(flatten(map, group)) {
                *acc += v;
            }
        }
        for (a, b) in sum.iter().zip(&want) {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_points_reach_both_budget_values() {
        let mut budgets = std::collections::BTreeSet::new();
        for seed in 0..20 {
            let (model, sample) = random_point(AdapterKind::Decoupled, seed).unwrap();
            let fwd = build_forward(&model, &sample).unwrap();
            for (_, t) in &fwd.adapter_traces {
                budgets.insert(t.p_for);
            }
        }
        assert!(budgets.len() >= 2, "{budgets:?}");
    }

    #[test]
    fn single_point_passes_and_fault_fails() {
        let (model, sample) = random_point(AdapterKind::Decoupled, 3).unwrap();
        let ok = check_point(&model, &sample, 1e-5, 0, false).unwrap();
        assert!(ok.iter().all(|e| e.rel_error < 1e-4), "{ok:?}");
        let bad = check_point(&model, &sample, 1e-5, 0, true).unwrap();
        assert!(bad.iter().any(|e| e.rel_error > 1e-4 && e.worst_path == "theta_D.b2"));
    }

    #[test]
    fn bad_eps_is_rejected() {
        let cfg = GradcheckConfig {
            eps: 0.0,
            ..GradcheckConfig::default()
        };
        assert!(run_gradcheck(&cfg).is_err());
    }
}
