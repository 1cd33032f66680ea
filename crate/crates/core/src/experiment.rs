//! Training runs, evaluation and the four-arm ablation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapters::AdapterConfig;
use crate::datakit::diagnostics::{format_float, MetricsRecord};
use crate::datakit::metrics::{mae, max_f_measure};
use crate::datakit::synth::{generate_dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::gradsurgery::{training_step, StepConfig, StepReport};
use crate::network::{forward_all, final_prediction, AdapterKind, ModelParams, NetConfig, Sample};
use crate::tensor::Tensor;

/// Random stream of the training split.
pub const TRAIN_SPLIT: u64 = 0;
/// Random stream of the held-out split.
pub const EVAL_SPLIT: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
/// Added to the run seed to seed model initialization.
const INIT_SEED_OFFSET: u64 = 0x5eed_0000;

/// Which mechanisms a run enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Fusion loss only, vanilla adapters.
    Baseline,
    /// Adds the two unimodal losses; stream gradients are summed.
    Unimodal,
    /// Unimodal losses with per-group deconfliction.
    Deconflict,
    /// Fusion loss only, decoupled adapters.
    Decoupled,
    /// Unimodal losses, deconfliction and decoupled adapters.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::Unimodal,
        Mode::Deconflict,
        Mode::Decoupled,
        Mode::Full,
    ];

    /// Ablation arms in table order.
    pub const ARMS: [Mode; 4] = [Mode::Baseline, Mode::Deconflict, Mode::Decoupled, Mode::Full];

    pub fn unimodal(self) -> bool {
        matches!(self, Mode::Unimodal | Mode::Deconflict | Mode::Full)
    }

    pub fn deconflict(self) -> bool {
        matches!(self, Mode::Deconflict | Mode::Full)
    }

    pub fn adapter_kind(self) -> AdapterKind {
        match self {
            Mode::Decoupled | Mode::Full => AdapterKind::Decoupled,
            _ => AdapterKind::Vanilla,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Unimodal => "+unimodal",
            Mode::Deconflict => "+deconflict",
            Mode::Decoupled => "+decoupled",
            Mode::Full => "full",
        }
    }

    /// Row label in the ablation table.
    pub fn arm_label(self) -> &'static str {
        match self {
            Mode::Deconflict => "+unimodal+deconflict",
            other => other.name(),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s.trim().trim_start_matches('+') {
            "baseline" => Ok(Mode::Baseline),
            "unimodal" => Ok(Mode::Unimodal),
            "deconflict" | "unimodal+deconflict" => Ok(Mode::Deconflict),
            "decoupled" => Ok(Mode::Decoupled),
            "full" => Ok(Mode::Full),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected baseline, +unimodal, +deconflict, +decoupled or full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub shuffle_projections: bool,
    /// Data generator settings; the seed field is overridden by `seed`.
    pub synth: SynthConfig,
    /// Adapter ratios; channel counts come from `net`.
    pub adapter: AdapterConfig,
    pub net: NetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        RunConfig {
            mode: Mode::Full,
            eta: 1e-3,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            train_samples: 64,
            eval_samples: 32,
            shuffle_projections: false,
            synth: SynthConfig::default(),
            adapter: net.adapter,
            net,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("--eta must be a positive number, got {}", self.eta)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("--epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("--batch-size must be at least 1"));
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::invalid("sample counts must be at least 1"));
        }
        self.synth_config().validate()?;
        self.net_config().validate()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            height: self.net.height,
            width: self.net.width,
            ..self.synth
        }
    }

    /// Network architecture with the mode's adapter kind and the configured ratios.
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            adapter_kind: self.mode.adapter_kind(),
            adapter: AdapterConfig {
                d: self.net.d,
                d_hat: self.net.adapter.d_hat,
                ..self.adapter
            },
            ..self.net
        }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            unimodal: self.mode.unimodal(),
            deconflict: self.mode.deconflict(),
            eta: self.eta,
            shuffle_projections: self.shuffle_projections,
        }
    }

    pub fn train_set(&self) -> Result<Vec<Sample>> {
        generate_dataset(&self.synth_config(), self.train_samples, TRAIN_SPLIT)
    }

    pub fn eval_set(&self) -> Result<Vec<Sample>> {
        generate_dataset(&self.synth_config(), self.eval_samples, EVAL_SPLIT)
    }

    pub fn init_model(&self) -> Result<ModelParams> {
        ModelParams::init(self.net_config(), self.seed.wrapping_add(INIT_SEED_OFFSET))
    }

    /// `key = value` lines describing the resolved configuration.
    pub fn to_config_text(&self) -> String {
        let s = &self.synth;
        let a = &self.adapter;
        let n = &self.net;
        let lines = [
            ("mode", self.mode.name().to_string()),
            ("eta", self.eta.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("shuffle_projections", self.shuffle_projections.to_string()),
            ("dominance", s.dominance.to_string()),
            ("bg_cue", s.background_cue_strength.to_string()),
            ("max_objects", s.max_objects.to_string()),
            ("height", n.height.to_string()),
            ("width", n.width.to_string()),
            ("patch", n.patch.to_string()),
            ("d", n.d.to_string()),
            ("layers", n.layers.to_string()),
            ("decoder_hidden", n.decoder_hidden.to_string()),
            ("d_hat", n.adapter.d_hat.to_string()),
            ("alpha_for", a.alpha_for.to_string()),
            ("alpha_back", a.alpha_back.to_string()),
            ("beta", a.beta.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
        }
        let key = key.trim().replace('-', "_");
        match key.as_str() {
            "mode" => self.mode = value.parse()?,
            "eta" => self.eta = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "train_samples" => self.train_samples = parse(&key, value)?,
            "eval_samples" => self.eval_samples = parse(&key, value)?,
            "shuffle_projections" => self.shuffle_projections = parse(&key, value)?,
            "dominance" => self.synth.dominance = parse(&key, value)?,
            "bg_cue" | "background_cue_strength" => {
                self.synth.background_cue_strength = parse(&key, value)?
            }
            "max_objects" => self.synth.max_objects = parse(&key, value)?,
            "height" => self.net.height = parse(&key, value)?,
            "width" => self.net.width = parse(&key, value)?,
            "patch" => self.net.patch = parse(&key, value)?,
            "d" => {
                self.net.d = parse(&key, value)?;
                self.net.adapter.d = self.net.d;
            }
            "layers" => self.net.layers = parse(&key, value)?,
            "decoder_hidden" => self.net.decoder_hidden = parse(&key, value)?,
            "d_hat" => self.net.adapter.d_hat = parse(&key, value)?,
            "alpha_for" => self.adapter.alpha_for = parse(&key, value)?,
            "alpha_back" => self.adapter.alpha_back = parse(&key, value)?,
            "beta" => self.adapter.beta = parse(&key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` config file body. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected `key = value`", n + 1))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }
}

/// Mean metrics over a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mae: f64,
    pub max_f: f64,
    pub per_sample: Vec<(f64, f64)>,
    pub predictions: Vec<Tensor>,
}

/// Final predictions and their metrics on `samples`.
pub fn evaluate(model: &ModelParams, samples: &[Sample]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let rows: Vec<(Tensor, f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let out = forward_all(s, model)?;
            let pred = final_prediction(&out.p_r, &out.p_t, &out.p_f)?;
            let m = mae(&pred, &s.gt)?;
            let f = if s.gt.data().iter().any(|&v| v > 0.5) {
                max_f_measure(&pred, &s.gt)?
            } else {
                0.0
            };
            Ok((pred, m, f))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mae_mean = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let f_mean = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let per_sample = rows.iter().map(|r| (r.1, r.2)).collect();
    Ok(EvalResult {
        mae: mae_mean,
        max_f: f_mean,
        per_sample,
        predictions: rows.into_iter().map(|r| r.0).collect(),
    })
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub records: Vec<MetricsRecord>,
    pub reports: Vec<StepReport>,
    pub model: ModelParams,
    pub eval: EvalResult,
}

impl RunOutcome {
    /// Median gradient ratio over the second half of training.
    pub fn late_grad_ratio(&self) -> f64 {
        let half = self.records.len() / 2;
        median(self.records[half..].iter().map(|r| r.grad_ratio))
    }
}

/// Trains a fresh model from `config` and evaluates it on the held-out split.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let train = config.train_set()?;
    let held_out = config.eval_set()?;
    let mut model = config.init_model()?;
    let step = config.step_config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let report = training_step(&batch, &mut model, &step, &mut rng)?;
            records.push(MetricsRecord::from_report(records.len(), &report));
            reports.push(report);
        }
    }
    let eval = evaluate(&model, &held_out)?;
    Ok(RunOutcome {
        config: config.clone(),
        records,
        reports,
        model,
        eval,
    })
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub mode: Mode,
    pub seeds: usize,
    pub median_mae: f64,
    pub median_max_f: f64,
    /// Median over seeds of each run's late-training gradient ratio.
    pub median_grad_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct Ablation {
    pub arms: Vec<ArmSummary>,
    /// Runs per arm, in arm order then seed order.
    pub runs: Vec<Vec<RunOutcome>>,
}

pub const ABLATION_HEADER: &str = "arm,seeds,median_mae,median_max_f,median_grad_ratio";

impl Ablation {
    pub fn arm(&self, mode: Mode) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for a in &self.arms {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                a.mode.arm_label(),
                a.seeds,
                format_float(a.median_mae),
                format_float(a.median_max_f),
                format_float(a.median_grad_ratio)
            ));
        }
        out
    }
}

/// Worker threads for parallel runs: `GRADWEAVE_THREADS` when set to a
/// positive integer, otherwise rayon's default.
pub fn worker_threads() -> Option<usize> {
    std::env::var("GRADWEAVE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// Runs each arm of [`Mode::ARMS`] for `seeds` consecutive seeds starting at
/// `base.seed`. Runs execute in parallel; results do not depend on the
/// thread count.
pub fn ablate(base: &RunConfig, seeds: usize) -> Result<Ablation> {
    if seeds == 0 {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let jobs: Vec<RunConfig> = Mode::ARMS
        .iter()
        .flat_map(|&mode| {
            (0..seeds as u64).map(move |k| RunConfig {
                mode,
                seed: base.seed + k,
                ..base.clone()
            })
        })
        .collect();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_threads() {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<RunOutcome> =
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?;

    let mut runs: Vec<Vec<RunOutcome>> = Vec::new();
    let mut arms = Vec::new();
    for (i, &mode) in Mode::ARMS.iter().enumerate() {
        let group: Vec<RunOutcome> = outcomes[i * seeds..(i + 1) * seeds].to_vec();
        arms.push(ArmSummary {
            mode,
            seeds,
            median_mae: median(group.iter().map(|r| r.eval.mae)),
            median_max_f: median(group.iter().map(|r| r.eval.max_f)),
            median_grad_ratio: median(group.iter().map(RunOutcome::late_grad_ratio)),
        });
        runs.push(group);
    }
    Ok(Ablation { arms, runs })
}
