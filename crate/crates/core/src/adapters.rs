//! Bottleneck adapters: the vanilla down/GeLU/up block and the decoupled
//! foreground/background pair whose bottleneck activations are sparsified by
//! a gated TopK budget.
//!
//! Token features are row-major `[tokens x d]` matrices, so a projection
//! `W_down` of shape `d x d_hat` is applied as `x * W_down`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{topk_keep, Tensor};

/// Slack applied before flooring a budget so that products which are
/// integers in exact arithmetic are not rounded down by one.
const BUDGET_FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    /// Input and output channel count.
    pub d: usize,
    /// Bottleneck channel count.
    pub d_hat: usize,
    pub alpha_for: f64,
    pub alpha_back: f64,
    /// Scale applied to the learned gate ratios.
    pub beta: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            d: 64,
            d_hat: 32,
            alpha_for: 0.45,
            alpha_back: 0.35,
            beta: 0.1,
        }
    }
}

impl AdapterConfig {
    /// Default ratios with the given channel counts.
    pub fn with_dims(d: usize, d_hat: usize) -> Self {
        AdapterConfig {
            d,
            d_hat,
            ..AdapterConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_hat < 1 || self.d_hat > self.d {
            return Err(Error::invalid(format!(
                "adapter bottleneck d_hat={} must lie in [1, d={}]",
                self.d_hat, self.d
            )));
        }
        let ratio_ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ratio_ok(self.alpha_for) || !ratio_ok(self.alpha_back) {
            return Err(Error::invalid("adapter alphas must lie in [0, 1]"));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::invalid("adapter beta must be >= 0"));
        }
        if self.alpha_for + self.beta > 1.0 || self.alpha_back + self.beta > 1.0 {
            return Err(Error::invalid("alpha + beta must not exceed 1"));
        }
        Ok(())
    }
}

/// Parameters of a decoupled adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w_down_for: Tensor,
    pub w_down_back: Tensor,
    pub w_up_for: Tensor,
    pub w_up_back: Tensor,
    /// `2 x d` map from the token-pooled feature to the two gate logits.
    pub gate_a: Tensor,
    pub gate_b: Tensor,
}

/// Parameter names inside one decoupled adapter, in registration order.
pub const DECOUPLED_PARAM_NAMES: [&str; 6] = [
    "W_down_for",
    "W_down_back",
    "W_up_for",
    "W_up_back",
    "gate_A",
    "gate_b",
];

/// Parameter names inside one vanilla adapter.
pub const VANILLA_PARAM_NAMES: [&str; 2] = ["W_down", "W_up"];

fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

impl AdapterParams {
    pub fn zeros(cfg: &AdapterConfig) -> Self {
        let (d, h) = (cfg.d, cfg.d_hat);
        AdapterParams {
            w_down_for: Tensor::zeros(&[d, h]),
            w_down_back: Tensor::zeros(&[d, h]),
            w_up_for: Tensor::zeros(&[h, d]),
            w_up_back: Tensor::zeros(&[h, d]),
            gate_a: Tensor::zeros(&[2, d]),
            gate_b: Tensor::zeros(&[2]),
        }
    }

    /// Gaussian initialization: down-projections with std `1/sqrt(d)`,
    /// up-projections and gate weights with std `up_std`, zero gate bias.
    pub fn random(cfg: &AdapterConfig, up_std: f64, rng: &mut impl Rng) -> Self {
        let (d, h) = (cfg.d, cfg.d_hat);
        let down_std = 1.0 / (d as f64).sqrt();
        AdapterParams {
            w_down_for: gaussian(&[d, h], down_std, rng),
            w_down_back: gaussian(&[d, h], down_std, rng),
            w_up_for: gaussian(&[h, d], up_std, rng),
            w_up_back: gaussian(&[h, d], up_std, rng),
            gate_a: gaussian(&[2, d], up_std, rng),
            gate_b: Tensor::zeros(&[2]),
        }
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.w_down_for,
            &self.w_down_back,
            &self.w_up_for,
            &self.w_up_back,
            &self.gate_a,
            &self.gate_b,
        ]
    }

    pub fn check_shapes(&self, cfg: &AdapterConfig) -> Result<()> {
        let (d, h) = (cfg.d, cfg.d_hat);
        let expected: [&[usize]; 6] = [&[d, h], &[d, h], &[h, d], &[h, d], &[2, d], &[2]];
        for (t, shape) in self.tensors().into_iter().zip(expected) {
            t.require_shape("adapter params", shape)?;
        }
        Ok(())
    }

    /// Inserts every tensor under `prefix.<name>`.
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        for (name, t) in DECOUPLED_PARAM_NAMES.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn register(&self, g: &mut Graph, prefix: &str) -> Result<DecoupledVars> {
        let [a, b, c, d, e, f] = self.tensors();
        Ok(DecoupledVars {
            w_down_for: g.param(format!("{prefix}.W_down_for"), a.clone())?,
            w_down_back: g.param(format!("{prefix}.W_down_back"), b.clone())?,
            w_up_for: g.param(format!("{prefix}.W_up_for"), c.clone())?,
            w_up_back: g.param(format!("{prefix}.W_up_back"), d.clone())?,
            gate_a: g.param(format!("{prefix}.gate_A"), e.clone())?,
            gate_b: g.param(format!("{prefix}.gate_b"), f.clone())?,
        })
    }
}

/// Graph handles of a registered decoupled adapter.
#[derive(Clone, Copy, Debug)]
pub struct DecoupledVars {
    pub w_down_for: Var,
    pub w_down_back: Var,
    pub w_up_for: Var,
    pub w_up_back: Var,
    pub gate_a: Var,
    pub gate_b: Var,
}

/// Values recorded by one decoupled adapter evaluation.
#[derive(Clone, Debug)]
pub struct DecoupledTrace {
    pub output: Var,
    pub g_for: f64,
    pub g_back: f64,
    pub p_for: usize,
    pub p_back: usize,
    /// Post-GeLU activations of both pathways, before masking.
    pub act_for: Var,
    pub act_back: Var,
}

/// `W_up * gelu(W_down * x)` per token, recorded on `g`.
pub fn vanilla_adapter_graph(g: &mut Graph, x: Var, w_down: Var, w_up: Var) -> Result<Var> {
    let z = g.matmul(x, w_down)?;
    let h = g.gelu(z)?;
    g.matmul(h, w_up)
}

/// Gate logits `A * mean_tokens(x) + b` followed by a two-way softmax,
/// recorded on `g`. Returns the `[1 x 2]` gate node.
pub fn gate_graph(g: &mut Graph, x: Var, gate_a: Var, gate_b: Var) -> Result<Var> {
    let pooled = g.mean_rows(x)?;
    let a_t = g.transpose(gate_a)?;
    let logits = g.matmul(pooled, a_t)?;
    let logits = g.add_row(logits, gate_b)?;
    g.softmax_rows(logits)
}

/// Decoupled adapter recorded on `g`.
///
/// The foreground pathway keeps the `P_for` largest GeLU activations per
/// token, the background pathway the `P_back` smallest. Budgets come from
/// the gate through a floor, which carries no gradient; the gate stays
/// trainable because each pathway output is scaled by `0.5 + G`.
pub fn decoupled_adapter_graph(
    g: &mut Graph,
    x: Var,
    vars: &DecoupledVars,
    cfg: &AdapterConfig,
) -> Result<DecoupledTrace> {
    let gate = gate_graph(g, x, vars.gate_a, vars.gate_b)?;
    let (g_for, g_back) = {
        let v = g.value(gate).data();
        (v[0], v[1])
    };
    let (p_for, p_back) = activation_budget(cfg, g_for, g_back);

    let z_for = g.matmul(x, vars.w_down_for)?;
    let act_for = g.gelu(z_for)?;
    let kept_for = g.topk_mask(act_for, p_for, true)?;
    let out_for = g.matmul(kept_for, vars.w_up_for)?;

    let z_back = g.matmul(x, vars.w_down_back)?;
    let act_back = g.gelu(z_back)?;
    let kept_back = g.topk_mask(act_back, p_back, false)?;
    let out_back = g.matmul(kept_back, vars.w_up_back)?;

    let gate_scale = g.offset(gate, 0.5)?;
    let out_for = g.scale_by(out_for, gate_scale, 0)?;
    let out_back = g.scale_by(out_back, gate_scale, 1)?;
    let output = g.add(out_for, out_back)?;
    Ok(DecoupledTrace {
        output,
        g_for,
        g_back,
        p_for,
        p_back,
        act_for,
        act_back,
    })
}

fn check_tokens(x: &Tensor, d: usize, op: &'static str) -> Result<()> {
    let (_, cols) = x.require_matrix(op)?;
    if cols != d {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![x.rows(), d],
            got: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Vanilla adapter on a `[tokens x d]` feature.
pub fn vanilla_adapter_forward(x: &Tensor, w_down: &Tensor, w_up: &Tensor) -> Result<Tensor> {
    let (_, d) = x.require_matrix("vanilla_adapter_forward")?;
    let (rows, d_hat) = w_down.require_matrix("vanilla_adapter_forward")?;
    if rows != d {
        return Err(Error::ShapeMismatch {
            op: "vanilla_adapter_forward",
            expected: vec![d, d_hat],
            got: w_down.shape().to_vec(),
        });
    }
    w_up.require_shape("vanilla_adapter_forward", &[d_hat, d])?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let dv = g.constant(w_down.clone());
    let uv = g.constant(w_up.clone());
    let out = vanilla_adapter_graph(&mut g, xv, dv, uv)?;
    Ok(g.value(out).clone())
}

/// Keeps `k` entries per row (largest or smallest, lower index on ties) and
/// zeroes the rest.
pub fn topk_mask(v: &Tensor, k: usize, largest: bool) -> Result<Tensor> {
    let (_, n) = v.require_matrix("topk_mask")?;
    if k > n {
        return Err(Error::invalid(format!("topk k={k} out of range [0, {n}]")));
    }
    let data = v
        .data()
        .chunks(n)
        .flat_map(|row| {
            let keep = topk_keep(row, k, largest);
            row.iter()
                .zip(keep)
                .map(|(&x, kept)| if kept { x } else { 0.0 })
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(v.shape().to_vec(), data)
}

/// `(G_for, G_back)` from the softmax gate over the token-mean of `x`.
pub fn gate_ratios(x: &Tensor, gate_a: &Tensor, gate_b: &Tensor) -> Result<(f64, f64)> {
    let (_, d) = x.require_matrix("gate_ratios")?;
    gate_a.require_shape("gate_ratios", &[2, d])?;
    gate_b.require_shape("gate_ratios", &[2])?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let av = g.constant(gate_a.clone());
    let bv = g.constant(gate_b.clone());
    let gate = gate_graph(&mut g, xv, av, bv)?;
    let v = g.value(gate).data();
    Ok((v[0], v[1]))
}

/// `(floor(d_hat (alpha_for + beta G_for)), floor(d_hat (alpha_back + beta G_back)))`.
pub fn activation_budget(cfg: &AdapterConfig, g_for: f64, g_back: f64) -> (usize, usize) {
    let budget = |alpha: f64, gate: f64| {
        let raw = cfg.d_hat as f64 * (alpha + cfg.beta * gate);
        ((raw + BUDGET_FLOOR_SLACK).floor().max(0.0) as usize).min(cfg.d_hat)
    };
    (budget(cfg.alpha_for, g_for), budget(cfg.alpha_back, g_back))
}

/// Decoupled adapter on a `[tokens x d]` feature.
pub fn decoupled_adapter_forward(
    x: &Tensor,
    params: &AdapterParams,
    cfg: &AdapterConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    check_tokens(x, cfg.d, "decoupled_adapter_forward")?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.register(&mut g, "adapter")?;
    let trace = decoupled_adapter_graph(&mut g, xv, &vars, cfg)?;
    Ok(g.value(trace.output).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(&[v]).unwrap()
    }

    #[test]
    fn topk_examples() {
        let v = row(&[0.2, -0.5, 0.9, 0.1]);
        assert_eq!(topk_mask(&v, 2, true).unwrap().data(), &[0.2, 0.0, 0.9, 0.0]);
        assert_eq!(topk_mask(&v, 0, true).unwrap().data(), &[0.0; 4]);
        assert_eq!(topk_mask(&v, 1, false).unwrap().data(), &[0.0, -0.5, 0.0, 0.0]);
        assert!(topk_mask(&v, 5, true).is_err());
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let v = row(&[1.0, 3.0, 3.0, 1.0]);
        assert_eq!(topk_mask(&v, 1, true).unwrap().data(), &[0.0, 3.0, 0.0, 0.0]);
        assert_eq!(topk_mask(&v, 1, false).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gate_examples() {
        let x = Tensor::matrix(&[&[1.0, 2.0], &[3.0, -4.0]]).unwrap();
        let zero_a = Tensor::zeros(&[2, 2]);
        assert_eq!(gate_ratios(&x, &zero_a, &Tensor::zeros(&[2])).unwrap(), (0.5, 0.5));
        let b = Tensor::new(vec![2], vec![3f64.ln(), 0.0]).unwrap();
        let (gf, gb) = gate_ratios(&x, &zero_a, &b).unwrap();
        assert!((gf - 0.75).abs() < 1e-15 && (gb - 0.25).abs() < 1e-15);
        assert!(gate_ratios(&x, &Tensor::zeros(&[2, 3]), &b).is_err());
    }

    #[test]
    fn budget_examples() {
        let cfg = AdapterConfig::default();
        assert_eq!(activation_budget(&cfg, 0.5, 0.5), (16, 12));
        assert_eq!(activation_budget(&cfg, 0.0, 0.0), (14, 11));
        assert_eq!(activation_budget(&cfg, 1.0, 1.0), (17, 14));
    }

    #[test]
    fn config_validation() {
        assert!(AdapterConfig::default().validate().is_ok());
        assert!(AdapterConfig::with_dims(16, 32).validate().is_err());
        assert!(AdapterConfig::with_dims(16, 0).validate().is_err());
        let mut cfg = AdapterConfig::with_dims(16, 8);
        cfg.alpha_for = 0.95;
        assert!(cfg.validate().is_err());
        cfg.alpha_for = 0.45;
        cfg.beta = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AdapterConfig::with_dims(4, 2);
        let x = gaussian(&[3, 4], 1.0, &mut rng);
        let w_up = gaussian(&[2, 4], 1.0, &mut rng);
        let w_down = gaussian(&[4, 2], 1.0, &mut rng);
        let zero_down = Tensor::zeros(&[4, 2]);
        let zero_up = Tensor::zeros(&[2, 4]);
        assert_eq!(vanilla_adapter_forward(&x, &zero_down, &w_up).unwrap(), Tensor::zeros(&[3, 4]));
        assert_eq!(vanilla_adapter_forward(&x, &w_down, &zero_up).unwrap(), Tensor::zeros(&[3, 4]));
        let out = decoupled_adapter_forward(&x, &AdapterParams::zeros(&cfg), &cfg).unwrap();
        assert_eq!(out, Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn full_foreground_budget_reduces_to_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AdapterConfig {
            d: 6,
            d_hat: 3,
            alpha_for: 1.0,
            alpha_back: 0.0,
            beta: 0.0,
        };
        let mut params = AdapterParams::random(&cfg, 0.5, &mut rng);
        params.gate_a = Tensor::zeros(&[2, 6]);
        let x = gaussian(&[5, 6], 1.0, &mut rng);
        let decoupled = decoupled_adapter_forward(&x, &params, &cfg).unwrap();
        let vanilla = vanilla_adapter_forward(&x, &params.w_down_for, &params.w_up_for).unwrap();
        assert_eq!(decoupled, vanilla);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[2, 4]);
        assert!(vanilla_adapter_forward(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2, 4])).is_err());
        assert!(vanilla_adapter_forward(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2, 3])).is_err());
        let cfg = AdapterConfig::with_dims(5, 2);
        assert!(decoupled_adapter_forward(&x, &AdapterParams::zeros(&cfg), &cfg).is_err());
    }
}
