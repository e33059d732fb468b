//! Computable terms of the compression and generalization bounds.
//!
//! The bias term `δ₁ = Σ_{ℓ=2}^L R̄^{L−ℓ+1} √(Π_{ℓ′≥ℓ} ζ_{ℓ′,θ}) √λ_ℓ` bounds the
//! compression error; the variance term
//! `δ₂² = (1/n) Σ_ℓ m♯_ℓ m♯_{ℓ+1} log₊(1 + 4Ĝ max(R̄, R̄_b)/R̂_∞)` depends only on the
//! compressed widths. The universal constants `c₁` and `C₁` are configurable.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::numerics::{dot, op_norm, Matrix};
use crate::pruner::{build_z, c_scale, compression_error, output_target, CovCache, Procedure, PruneOutcome, ZSpec};
use crate::spectral::{dof, dof_output_cross};
use crate::trainer::{Dataset, Loss};

/// `log₊(x) = max(1, log x)`.
pub fn log_plus(x: f64) -> f64 {
    if x > 0.0 {
        x.ln().max(1.0)
    } else {
        1.0
    }
}

/// Norm constants of the model class, measured from a trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBudget {
    /// Smallest `R` with `max_j ‖W⁽ℓ⁾_{j,:}‖ ≤ R/√m_{ℓ+1}` for every layer.
    pub r: f64,
    /// Smallest `R_b` with `‖b⁽ℓ⁾‖_∞ ≤ R_b/√m_{ℓ+1}` for every layer.
    pub r_b: f64,
    pub c1: f64,
    /// `max_i ‖x_i‖`.
    pub d_x: f64,
    /// Output truncation level; `None` means no truncation.
    pub truncation: Option<f64>,
    pub depth: usize,
}

impl NormBudget {
    pub fn measure(net: &Network, data: &Dataset, c1: f64, truncation: Option<f64>) -> Result<Self> {
        if !(c1 > 0.0) {
            return Err(Error::InvalidParameter(format!("c1 = {c1} must be positive")));
        }
        if let Some(m) = truncation {
            if !(m > 0.0) {
                return Err(Error::InvalidParameter(format!("truncation level {m} must be positive")));
            }
        }
        let mut r: f64 = 0.0;
        let mut r_b: f64 = 0.0;
        for layer in net.layers() {
            let w = &layer.weight;
            let scale = (w.rows() as f64).sqrt();
            let max_row = (0..w.rows()).map(|j| dot(w.row(j), w.row(j)).sqrt()).fold(0.0, f64::max);
            let max_bias = layer.bias.iter().fold(0.0f64, |m, b| m.max(b.abs()));
            r = r.max(scale * max_row);
            r_b = r_b.max(scale * max_bias);
        }
        let d_x = (0..data.len())
            .map(|i| dot(data.inputs.row(i), data.inputs.row(i)).sqrt())
            .fold(0.0, f64::max);
        Ok(NormBudget {
            r,
            r_b,
            c1,
            d_x,
            truncation,
            depth: net.depth(),
        })
    }

    pub fn r_bar(&self) -> f64 {
        self.c1.sqrt() * self.r
    }

    pub fn r_bar_b(&self) -> f64 {
        self.c1.sqrt() * self.r_b
    }

    /// `R̂_∞ = min(R̄^L D_x + Σ_{ℓ=1}^L R̄^{L−ℓ} R̄_b, M)`.
    pub fn r_infinity(&self) -> f64 {
        let l = self.depth as i32;
        let rb = self.r_bar();
        let raw = rb.powi(l) * self.d_x + (1..=l).map(|k| rb.powi(l - k) * self.r_bar_b()).sum::<f64>();
        self.truncation.map_or(raw, |m| raw.min(m))
    }

    /// `Ĝ = L R̄^{L−1} D_x + Σ_{ℓ=1}^L R̄^{L−ℓ}`.
    pub fn g_hat(&self) -> f64 {
        let l = self.depth as i32;
        let rb = self.r_bar();
        l as f64 * rb.powi(l - 1) * self.d_x + (1..=l).map(|k| rb.powi(l - k)).sum::<f64>()
    }

    /// The common `log₊` factor of `δ₂²`.
    pub fn variance_log(&self) -> f64 {
        let r_inf = self.r_infinity();
        let num = 4.0 * self.g_hat() * self.r_bar().max(self.r_bar_b());
        if num == 0.0 {
            log_plus(1.0)
        } else if r_inf > 0.0 {
            log_plus(1.0 + num / r_inf)
        } else {
            f64::INFINITY
        }
    }
}

/// `δ₁` from per-layer `λ_ℓ` and `ζ_ℓ` for `ℓ = 2..=L` (slices start at `ℓ = 2`).
pub fn delta1(lambdas: &[f64], zetas: &[f64], r_bar: f64) -> Result<f64> {
    if lambdas.len() != zetas.len() {
        return Err(Error::ShapeMismatch(format!("{} λ values but {} ζ values", lambdas.len(), zetas.len())));
    }
    let depth = lambdas.len() + 1;
    let mut total = 0.0;
    for (i, &lambda) in lambdas.iter().enumerate() {
        if lambda < 0.0 {
            return Err(Error::NegativeLambda(lambda));
        }
        let l = i + 2;
        let prod: f64 = zetas[i..].iter().product();
        total += r_bar.powi((depth - l + 1) as i32) * prod.max(0.0).sqrt() * lambda.sqrt();
    }
    Ok(total)
}

/// `δ₂` for the width chain `(m_1, …, m_{L+1})`.
pub fn delta2(widths: &[usize], n: usize, budget: &NormBudget) -> Result<f64> {
    if widths.len() < 2 || n == 0 {
        return Err(Error::InvalidParameter("δ₂ needs at least two widths and n > 0".into()));
    }
    let pairs: f64 = widths.windows(2).map(|w| (w[0] * w[1]) as f64).sum();
    Ok((pairs * budget.variance_log() / n as f64).sqrt())
}

/// `R_{n,t} = (t + Σ_{ℓ=2}^L log m_ℓ)/n` for the width chain `(m_1, …, m_{L+1})`.
pub fn r_nt(t: f64, widths: &[usize], n: usize) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("t = {t} must be positive")));
    }
    if widths.len() < 2 || n == 0 {
        return Err(Error::InvalidParameter("R_{n,t} needs at least two widths and n > 0".into()));
    }
    let hidden: f64 = widths[1..widths.len() - 1].iter().map(|&m| (m as f64).ln()).sum();
    Ok((t + hidden) / n as f64)
}

/// `‖WᵀI_qW‖_op` with `q` supported on `rows`.
fn weighted_op_norm(w: &Matrix, rows: &[usize], q: &[f64]) -> Result<f64> {
    let mut scaled = Matrix::zeros(rows.len(), w.cols());
    for (k, (&j, &qj)) in rows.iter().zip(q).enumerate() {
        let s = qj.sqrt();
        for (d, v) in scaled.row_mut(k).iter_mut().zip(w.row(j)) {
            *d = s * v;
        }
    }
    let op = op_norm(&scaled)?;
    if op == 0.0 {
        return Err(Error::ZeroOperatorNorm);
    }
    Ok(op * op)
}

/// Inputs of one `ζ_{ℓ,θ}` evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ZetaInputs<'a> {
    /// `Ŵ⁽ℓ⁾`, mapping layer `ℓ` to layer `ℓ+1`.
    pub weight: &'a Matrix,
    pub z: &'a ZSpec,
    /// `N̂_ℓ(λ_ℓ)`.
    pub dof: f64,
    /// `N̂′_ℓ(λ_ℓ; Z)`.
    pub dof_output: f64,
    /// `m_ℓ` (channels of layer `ℓ`).
    pub width: usize,
    /// `m♯_{ℓ+1}`.
    pub next_width_sharp: usize,
    pub theta: f64,
}

/// Terms of `ζ_{ℓ,θ}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Zeta {
    pub n_theta: f64,
    /// Weight ratio in the denominator (`max_j‖W_j‖²/‖WᵀI_qW‖_op`, or its
    /// `q`-weighted form for the simultaneous procedure).
    pub op_ratio: f64,
    pub value: f64,
}

/// `ζ_{ℓ,θ} = N^θ (θ max_j‖Ŵ_j‖²/‖ŴᵀI_qŴ‖_op + (1−θ)m_ℓ)⁻¹` for the backward procedure.
pub fn zeta_backward(inp: &ZetaInputs) -> Result<Zeta> {
    let n_theta = inp.theta * inp.dof + (1.0 - inp.theta) * inp.dof_output;
    let w = inp.weight;
    let max_sq = (0..w.rows()).map(|j| dot(w.row(j), w.row(j))).fold(0.0, f64::max);
    let ratio = max_sq / weighted_op_norm(w, &inp.z.rows, &inp.z.q)?;
    let denom = inp.theta * ratio + (1.0 - inp.theta) * inp.width as f64;
    Ok(Zeta {
        n_theta,
        op_ratio: ratio,
        value: n_theta / denom,
    })
}

/// `ζ_{ℓ,θ} = c_scale N^θ (θ m♯_{ℓ+1} max_j q_j‖Ŵ_j‖²/‖ŴᵀI_qŴ‖_op + (1−θ) m♯_{ℓ+1})⁻¹`
/// for the simultaneous procedure.
pub fn zeta_simultaneous(inp: &ZetaInputs, c_scale: f64) -> Result<Zeta> {
    let n_theta = inp.theta * inp.dof + (1.0 - inp.theta) * inp.dof_output;
    let w = inp.weight;
    let max_q = inp
        .z
        .rows
        .iter()
        .zip(&inp.z.q)
        .map(|(&j, &q)| q * dot(w.row(j), w.row(j)))
        .fold(0.0, f64::max);
    let ratio = max_q / weighted_op_norm(w, &inp.z.rows, &inp.z.q)?;
    let m = inp.next_width_sharp as f64;
    let denom = inp.theta * m * ratio + (1.0 - inp.theta) * m;
    Ok(Zeta {
        n_theta,
        op_ratio: ratio,
        value: c_scale * n_theta / denom,
    })
}

/// Report settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub c1: f64,
    /// Constant `C₁` multiplying the variance terms.
    pub big_c1: f64,
    pub t: f64,
    pub truncation: Option<f64>,
    /// Lipschitz constant of the loss; derived from the loss when absent.
    pub rho: Option<f64>,
    pub loss: Loss,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            c1: 1.0,
            big_c1: 1.0,
            t: 1.0,
            truncation: None,
            rho: None,
            loss: Loss::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerBound {
    pub layer: usize,
    pub pruned: bool,
    pub width: usize,
    pub width_sharp: usize,
    pub lambda: f64,
    pub dof: f64,
    pub dof_output: f64,
    pub n_theta: f64,
    pub op_ratio: f64,
    pub c_scale: Option<f64>,
    pub zeta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub procedure: Procedure,
    pub theta: f64,
    pub n: usize,
    pub budget: NormBudget,
    pub r_bar: f64,
    pub r_bar_b: f64,
    pub big_c1: f64,
    pub t: f64,
    pub rho: f64,
    pub r_infinity: f64,
    pub g_hat: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// `δ₂` evaluated at the original widths.
    pub delta2_original: f64,
    pub r_nt: f64,
    pub training_loss: f64,
    pub compression_error: f64,
    /// `‖f̂ − f♯‖_n / δ₁`, the constant that would make the compression bound tight.
    pub empirical_ratio: Option<f64>,
    pub bound: f64,
    pub widths: Vec<usize>,
    pub widths_sharp: Vec<usize>,
    pub layers: Vec<LayerBound>,
    pub warnings: Vec<String>,
}

fn clamp_outputs(out: &mut Matrix, level: Option<f64>) {
    if let Some(m) = level {
        out.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(-m, m));
    }
}

/// Lipschitz constant of `ψ(y, ·)` in the Euclidean norm on the reachable outputs.
pub fn default_rho(loss: Loss, r_infinity: f64, targets: &Matrix) -> f64 {
    match loss {
        // ∇ψ = softmax(f) − y has norm at most √2 for one-hot y
        Loss::SoftmaxCrossEntropy => 2f64.sqrt(),
        Loss::Squared => {
            let y_max = (0..targets.rows())
                .map(|i| dot(targets.row(i), targets.row(i)).sqrt())
                .fold(0.0, f64::max);
            2.0 * (r_infinity + y_max)
        }
    }
}

/// Evaluates every bound term for `outcome`, which must come from pruning `net` on `data`.
pub fn bound_report(net: &Network, outcome: &PruneOutcome, data: &Dataset, cfg: &BoundConfig) -> Result<BoundReport> {
    let budget = NormBudget::measure(net, data, cfg.c1, cfg.truncation)?;
    let prune_cfg = &outcome.config;
    let depth = net.depth();
    let widths: Vec<usize> = net.widths();
    let widths_sharp: Vec<usize> = outcome.network.widths();
    let resolved = outcome.resolved();
    let selections = outcome.selected_sets();
    let mut cache = CovCache::with_entries(net, data, outcome.covariances.clone());
    let mut warnings = Vec::new();
    let mut layers = Vec::with_capacity(depth.saturating_sub(1));
    for l in 2..=depth {
        let cov = cache.get(l)?;
        let plan = outcome.plan(l);
        let (z, next_lev) = match plan {
            Some(p) => {
                let (_, lev) = build_z(net, &mut cache, prune_cfg, &resolved, &selections, l)?;
                (p.z.clone(), lev)
            }
            None => build_z(net, &mut cache, prune_cfg, &resolved, &selections, l)?,
        };
        let target = match plan {
            Some(p) => p.target.clone(),
            None => output_target(net, data, &cov, &z.z)?,
        };
        let lambda = plan.map_or(0.0, |p| p.lambda);
        let n_dof = dof(&cov, lambda)?;
        let n_out = dof_output_cross(&cov, &target, lambda)?;
        let inputs = ZetaInputs {
            weight: &net.layer(l).weight,
            z: &z,
            dof: n_dof,
            dof_output: n_out,
            width: widths[l - 1],
            next_width_sharp: widths_sharp[l],
            theta: prune_cfg.theta,
        };
        let (zeta, scale) = match prune_cfg.procedure {
            Procedure::Backward => (zeta_backward(&inputs)?, None),
            Procedure::Simultaneous => {
                let c = c_scale(net, l, next_lev.as_deref(), budget.r);
                (zeta_simultaneous(&inputs, c)?, Some(c))
            }
        };
        if zeta.value > 1.0 {
            warnings.push(format!("ζ for layer {l} is {:.4} > 1", zeta.value));
        }
        layers.push(LayerBound {
            layer: l,
            pruned: plan.is_some(),
            width: widths[l - 1],
            width_sharp: widths_sharp[l - 1],
            lambda,
            dof: n_dof,
            dof_output: n_out,
            n_theta: zeta.n_theta,
            op_ratio: zeta.op_ratio,
            c_scale: scale,
            zeta: zeta.value,
        });
    }
    for sel in outcome.selections.iter().filter(|s| !s.feasible) {
        warnings.push(format!(
            "layer {} kept {} of {} nodes under the leverage budget",
            sel.layer,
            sel.indices.len(),
            sel.m_sharp
        ));
    }

    let lambdas: Vec<f64> = layers.iter().map(|b| b.lambda).collect();
    let zetas: Vec<f64> = layers.iter().map(|b| b.zeta).collect();
    let d1 = delta1(&lambdas, &zetas, budget.r_bar())?;
    let n = data.len();
    let d2 = delta2(&widths_sharp, n, &budget)?;
    let d2_orig = delta2(&widths, n, &budget)?;
    let rnt = r_nt(cfg.t, &widths, n)?;
    let r_inf = budget.r_infinity();

    let mut outputs = net.forward_batch(&data.inputs)?;
    clamp_outputs(&mut outputs, cfg.truncation);
    let training_loss = cfg.loss.mean(&outputs, &data.targets);
    let err = compression_error(net, &outcome.network, data)?;
    let rho = cfg.rho.unwrap_or_else(|| default_rho(cfg.loss, r_inf, &data.targets));
    let bound = training_loss + rho * (d1 + cfg.big_c1 * r_inf * (d2 + d2 * d2 + rnt.sqrt()));
    Ok(BoundReport {
        procedure: prune_cfg.procedure,
        theta: prune_cfg.theta,
        n,
        r_bar: budget.r_bar(),
        r_bar_b: budget.r_bar_b(),
        g_hat: budget.g_hat(),
        budget,
        big_c1: cfg.big_c1,
        t: cfg.t,
        rho,
        r_infinity: r_inf,
        delta1: d1,
        delta2: d2,
        delta2_original: d2_orig,
        r_nt: rnt,
        training_loss,
        compression_error: err,
        empirical_ratio: (d1 > 0.0).then(|| err / d1),
        bound,
        widths,
        widths_sharp,
        layers,
        warnings,
    })
}

impl BoundReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per node layer.
    pub fn write_layer_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        for row in &self.layers {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Aggregate terms as `key,value` rows.
    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["key", "value"])?;
        for (k, v) in self.summary() {
            w.write_record([k.as_str(), v.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("procedure", format!("{:?}", self.procedure).to_lowercase());
        put("theta", self.theta.to_string());
        put("n", self.n.to_string());
        put("R", self.budget.r.to_string());
        put("R_b", self.budget.r_b.to_string());
        put("c1", self.budget.c1.to_string());
        put("C1", self.big_c1.to_string());
        put("D_x", self.budget.d_x.to_string());
        put("M", self.budget.truncation.map_or("inf".into(), |m| m.to_string()));
        put("rho", self.rho.to_string());
        put("t", self.t.to_string());
        put("R_infinity", self.r_infinity.to_string());
        put("G_hat", self.g_hat.to_string());
        put("delta1", self.delta1.to_string());
        put("delta2", self.delta2.to_string());
        put("delta2_original", self.delta2_original.to_string());
        put("R_nt", self.r_nt.to_string());
        put("training_loss", self.training_loss.to_string());
        put("compression_error", self.compression_error.to_string());
        put("empirical_ratio", self.empirical_ratio.map_or(String::new(), |r| r.to_string()));
        put("bound", self.bound.to_string());
        m
    }
}
