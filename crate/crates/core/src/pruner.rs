//! Spectral pruning: greedy node/channel selection with ridge reconstruction.
//!
//! For a selected index set `J` with ridge `τ`, the reconstruction matrix is
//! `Â_J = Σ̂_{F,J}(Σ̂_{J,J}+I_τ)⁻¹`, and the objective
//! `L^(θ)(J) = θ L^(A)(J) + (1−θ) L^(B)(J)` combines the input loss
//! `Tr[Σ̂ − Σ̂_{F,J}(Σ̂_{J,J}+I_τ)⁻¹Σ̂_{J,F}]` with the same residual seen through
//! the next layer's scaled weight rows `Z`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::covariance::{layer_cov, output_channel_cov, CrossCovariance, LayerCovariance};
use crate::error::{Error, Result};
use crate::model::{Layer, LayerKind, Network};
use crate::numerics::{pinv_solve, psd_solve, select_rows, submatrix, Matrix};
use crate::spectral::{lambda_for_width, leverage, width_for_lambda, LeverageScores, LAMBDA_COEF_PRUNE};
use crate::trainer::Dataset;

/// Budget multiplier in `Σ_{j∈J} 1/q̃_j ≤ (5/3) m_ℓ m♯`.
pub const BUDGET_FACTOR: f64 = 5.0 / 3.0;
/// Eigenvalue cutoff (relative to the largest) for unregularized reconstructions.
const PINV_RCOND: f64 = 1e-12;
/// Schur complements below this fraction of `Tr Σ̂` mark a candidate as already spanned.
const SPANNED_TOL: f64 = 1e-11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Backward,
    Simultaneous,
}

/// How the target width `m♯` and the regularization `λ` of one layer are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthPolicy {
    /// Fixed width; `λ` is the smallest value whose degrees of freedom fit it.
    Width(usize),
    /// `λ = c · Tr Σ̂`; the width follows from `λ`.
    LambdaCoef(f64),
    /// Both fixed independently.
    WidthAndLambdaCoef { width: usize, coef: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPolicy {
    /// `τ_j = m♯ λ q̃_j`.
    Leverage,
    /// The same ridge for every node.
    Scalar(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub theta: f64,
    /// Node layers to prune (`2..=L`) and their width policies; others stay intact.
    pub layers: BTreeMap<usize, WidthPolicy>,
    pub procedure: Procedure,
    pub budget_constraint: bool,
    pub tau: TauPolicy,
    /// `λ / Tr Σ̂` used for leverage scores of layers that are not pruned.
    pub default_lambda_coef: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            theta: 0.5,
            layers: BTreeMap::new(),
            procedure: Procedure::Backward,
            budget_constraint: true,
            tau: TauPolicy::Leverage,
            default_lambda_coef: LAMBDA_COEF_PRUNE,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, net: &Network) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidParameter(format!("θ = {} outside [0, 1]", self.theta)));
        }
        if !(self.default_lambda_coef >= 0.0) {
            return Err(Error::NegativeLambda(self.default_lambda_coef));
        }
        if let TauPolicy::Scalar(s) = self.tau {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidParameter(format!("scalar τ {s} must be finite and ≥ 0")));
            }
        }
        for (&l, policy) in &self.layers {
            if l < 2 || l > net.depth() {
                return Err(Error::InvalidParameter(format!("cannot prune node layer {l}; valid range is 2..={}", net.depth())));
            }
            let m = net.node_shape(l).channels;
            let width = match *policy {
                WidthPolicy::Width(w) | WidthPolicy::WidthAndLambdaCoef { width: w, .. } => Some(w),
                WidthPolicy::LambdaCoef(_) => None,
            };
            if let Some(w) = width {
                if w == 0 || w > m {
                    return Err(Error::InvalidParameter(format!("width {w} for layer {l} outside 1..={m}")));
                }
            }
            let coef = match *policy {
                WidthPolicy::LambdaCoef(c) | WidthPolicy::WidthAndLambdaCoef { coef: c, .. } => Some(c),
                WidthPolicy::Width(_) => None,
            };
            if let Some(c) = coef {
                if !(c >= 0.0) || !c.is_finite() {
                    return Err(Error::NegativeLambda(c));
                }
            }
        }
        Ok(())
    }
}

fn check_index_set(j: &[usize], m: usize) -> Result<()> {
    submatrix(&Matrix::zeros(m, 0), j, &[]).map(|_| ())
}

/// Solves `(Σ̂_{J,J} + diag τ) X = rhs`, through the pseudo-inverse when `τ ≡ 0`
/// or when the Cholesky factorization meets a negligible pivot.
fn solve_j(sigma_jj: &Matrix, tau: &[f64], rhs: &Matrix) -> Result<Matrix> {
    if tau.iter().all(|&t| t == 0.0) {
        return pinv_solve(sigma_jj, tau, rhs, PINV_RCOND);
    }
    match psd_solve(sigma_jj, tau, rhs) {
        Err(Error::Singular { .. }) => pinv_solve(sigma_jj, tau, rhs, PINV_RCOND),
        other => other,
    }
}

fn frob_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// `L^(A)_τ(J)` evaluated directly from the closed form (`τ` aligned with `J`).
pub fn loss_a(cov: &LayerCovariance, j: &[usize], tau: &[f64]) -> Result<f64> {
    check_tau(j, tau)?;
    let m = cov.dim();
    check_index_set(j, m)?;
    if j.is_empty() {
        return Ok(cov.trace());
    }
    let all: Vec<usize> = (0..m).collect();
    let s_jj = submatrix(&cov.sigma, j, j)?;
    let s_jf = submatrix(&cov.sigma, j, &all)?;
    let x = psd_solve(&s_jj, tau, &s_jf)?;
    Ok((cov.trace() - frob_inner(&s_jf, &x)).max(0.0))
}

/// `L^(B)_τ(J)` from the cross covariance `C` of the next layer's outputs.
pub fn loss_b(cov: &LayerCovariance, target: &CrossCovariance, j: &[usize], tau: &[f64]) -> Result<f64> {
    check_tau(j, tau)?;
    check_index_set(j, cov.dim())?;
    if target.z_sigma.cols() != cov.dim() {
        return Err(Error::ShapeMismatch("cross covariance does not match the layer".into()));
    }
    if j.is_empty() {
        return Ok(target.z_energy);
    }
    let s_jj = submatrix(&cov.sigma, j, j)?;
    let all_rows: Vec<usize> = (0..target.z_sigma.rows()).collect();
    let c_j = submatrix(&target.z_sigma, &all_rows, j)?.transpose();
    let x = psd_solve(&s_jj, tau, &c_j)?;
    Ok((target.z_energy - frob_inner(&c_j, &x)).max(0.0))
}

fn check_tau(j: &[usize], tau: &[f64]) -> Result<()> {
    if j.len() != tau.len() {
        return Err(Error::ShapeMismatch(format!("{} indices but {} ridge values", j.len(), tau.len())));
    }
    if tau.iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::InvalidParameter("ridge values must be nonnegative".into()));
    }
    Ok(())
}

/// `Â_J = Σ̂_{F,J}(Σ̂_{J,J}+I_τ)⁻¹` (pseudo-inverse when `τ ≡ 0`).
pub fn reconstruction(cov: &LayerCovariance, j: &[usize], tau: &[f64]) -> Result<Matrix> {
    check_tau(j, tau)?;
    let all: Vec<usize> = (0..cov.dim()).collect();
    let s_jj = submatrix(&cov.sigma, j, j)?;
    let s_jf = submatrix(&cov.sigma, j, &all)?;
    Ok(solve_j(&s_jj, tau, &s_jf)?.transpose())
}

/// Parameters of one greedy selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectParams {
    pub theta: f64,
    pub m_sharp: usize,
    pub lambda: f64,
    pub tau: TauPolicy,
    pub budget_constraint: bool,
}

/// Outcome of pruning one layer.
#[derive(Clone, Debug, Serialize)]
pub struct SelectionResult {
    pub layer: usize,
    /// Requested width.
    pub m_sharp: usize,
    pub lambda: f64,
    pub theta: f64,
    /// Selected nodes, ascending.
    pub indices: Vec<usize>,
    /// Selected nodes in the order the greedy search added them.
    pub order: Vec<usize>,
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_theta: f64,
    /// `L^(θ)` after each greedy step, starting from the empty set.
    pub trajectory: Vec<f64>,
    pub budget_constraint: bool,
    pub budget_used: f64,
    pub budget_limit: f64,
    /// False when the budget constraint ran out of admissible nodes before `m♯`.
    pub feasible: bool,
    /// Ridge values aligned with `indices`.
    pub tau: Vec<f64>,
    pub leverage: Vec<f64>,
    #[serde(skip)]
    pub a_hat: Matrix,
}

/// Greedy minimization of `L^(θ)` over index sets of size `m♯`.
///
/// Nodes with zero leverage never enter `J`, so `|J|` is capped by the number of
/// live nodes; the leverage-based τ and the budget then use the capped width.
/// Ties go to the lowest index.
pub fn greedy_select(cov: &LayerCovariance, target: Option<&CrossCovariance>, params: &SelectParams) -> Result<SelectionResult> {
    let m = cov.dim();
    if params.m_sharp == 0 || params.m_sharp > m {
        return Err(Error::InvalidParameter(format!("width {} outside 1..={m}", params.m_sharp)));
    }
    if !(0.0..=1.0).contains(&params.theta) {
        return Err(Error::InvalidParameter(format!("θ = {} outside [0, 1]", params.theta)));
    }
    if let Some(t) = target {
        if t.z_sigma.cols() != m {
            return Err(Error::ShapeMismatch("cross covariance does not match the layer".into()));
        }
    }
    let lev = leverage(cov, params.lambda)?;
    let live = lev.support();
    let target_width = params.m_sharp.min(live.len());
    let tau_full: Vec<f64> = match params.tau {
        TauPolicy::Leverage => lev.scores.iter().map(|q| target_width as f64 * params.lambda * q).collect(),
        TauPolicy::Scalar(s) => vec![s; m],
    };
    let budget_limit = BUDGET_FACTOR * m as f64 * target_width as f64;
    let cost: Vec<f64> = lev.scores.iter().map(|&q| if q > 0.0 { 1.0 / q } else { f64::INFINITY }).collect();

    let search = GreedySearch::new(cov, target, params.theta, &tau_full);
    let budget = params.budget_constraint.then_some((cost.as_slice(), budget_limit));
    let (order, trajectory) = search.run(&live, target_width, budget);

    let mut indices = order.clone();
    indices.sort_unstable();
    let tau: Vec<f64> = indices.iter().map(|&j| tau_full[j]).collect();
    let budget_used: f64 = indices.iter().map(|&j| cost[j]).sum();
    let (a_hat, loss_a, loss_b) = evaluate_selection(cov, target, &indices, &tau)?;
    let loss_theta = params.theta * loss_a + (1.0 - params.theta) * loss_b;
    Ok(SelectionResult {
        layer: cov.layer,
        m_sharp: params.m_sharp,
        lambda: params.lambda,
        theta: params.theta,
        feasible: indices.len() == target_width,
        indices,
        order,
        loss_a,
        loss_b,
        loss_theta,
        trajectory,
        budget_constraint: params.budget_constraint,
        budget_used,
        budget_limit,
        tau,
        leverage: lev.scores,
        a_hat,
    })
}

/// `Â_J` with the final `L^(A)` and `L^(B)` from the closed forms.
fn evaluate_selection(
    cov: &LayerCovariance,
    target: Option<&CrossCovariance>,
    j: &[usize],
    tau: &[f64],
) -> Result<(Matrix, f64, f64)> {
    let m = cov.dim();
    let energy = target.map_or(0.0, |t| t.z_energy);
    if j.is_empty() {
        return Ok((Matrix::zeros(m, 0), cov.trace(), energy));
    }
    let all: Vec<usize> = (0..m).collect();
    let s_jj = submatrix(&cov.sigma, j, j)?;
    let s_jf = submatrix(&cov.sigma, j, &all)?;
    let x = solve_j(&s_jj, tau, &s_jf)?;
    let loss_a = (cov.trace() - frob_inner(&s_jf, &x)).max(0.0);
    let loss_b = match target {
        Some(t) => {
            let rows: Vec<usize> = (0..t.z_sigma.rows()).collect();
            let c_j = submatrix(&t.z_sigma, &rows, j)?.transpose();
            let y = solve_j(&s_jj, tau, &c_j)?;
            (t.z_energy - frob_inner(&c_j, &y)).max(0.0)
        }
        None => 0.0,
    };
    Ok((x.transpose(), loss_a, loss_b))
}

/// Incremental greedy state: residual `R = Σ̂ − Σ̂_{F,J}M⁻¹Σ̂_{J,F}` and
/// `G = B − B_{:,J}M⁻¹Σ̂_{J,F}` with `B = [√θ Σ̂ ; √(1−θ) C]`, `M = Σ̂_{J,J}+I_τ`.
/// Adding `c` lowers the objective by `‖G_{:,c}‖² / (R_cc + τ_c)`.
struct GreedySearch<'a> {
    residual: Matrix,
    g: Matrix,
    tau: &'a [f64],
    base: f64,
    spanned: f64,
}

impl<'a> GreedySearch<'a> {
    fn new(cov: &LayerCovariance, target: Option<&CrossCovariance>, theta: f64, tau: &'a [f64]) -> Self {
        let m = cov.dim();
        let sa = theta.sqrt();
        let sb = (1.0 - theta).sqrt();
        let k = if theta < 1.0 { target.map_or(0, |t| t.z_sigma.rows()) } else { 0 };
        let top = if theta > 0.0 { m } else { 0 };
        let mut g = Matrix::zeros(top + k, m);
        for r in 0..top {
            for (d, s) in g.row_mut(r).iter_mut().zip(cov.sigma.row(r)) {
                *d = sa * s;
            }
        }
        if let Some(t) = target.filter(|_| k > 0) {
            for r in 0..k {
                for (d, s) in g.row_mut(top + r).iter_mut().zip(t.z_sigma.row(r)) {
                    *d = sb * s;
                }
            }
        }
        let energy = target.map_or(0.0, |t| t.z_energy);
        GreedySearch {
            residual: cov.sigma.clone(),
            g,
            tau,
            base: theta * cov.trace() + (1.0 - theta) * energy,
            spanned: SPANNED_TOL * cov.trace().max(f64::MIN_POSITIVE),
        }
    }

    fn column_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0; self.g.cols()];
        for r in 0..self.g.rows() {
            for (n, v) in norms.iter_mut().zip(self.g.row(r)) {
                *n += v * v;
            }
        }
        norms
    }

    fn add(&mut self, c: usize) -> f64 {
        let d2 = self.residual.get(c, c) + self.tau[c];
        let r_c = self.residual.row(c).to_vec();
        let g_c = self.g.col(c);
        let gain = g_c.iter().map(|v| v * v).sum::<f64>() / d2;
        for (i, &gi) in g_c.iter().enumerate() {
            if gi != 0.0 {
                let f = gi / d2;
                for (d, r) in self.g.row_mut(i).iter_mut().zip(&r_c) {
                    *d -= f * r;
                }
            }
        }
        for (i, &ri) in r_c.iter().enumerate() {
            if ri != 0.0 {
                let f = ri / d2;
                for (d, r) in self.residual.row_mut(i).iter_mut().zip(&r_c) {
                    *d -= f * r;
                }
            }
        }
        gain
    }

    /// Returns the greedy order and the objective after each step.
    fn run(mut self, live: &[usize], width: usize, budget: Option<(&[f64], f64)>) -> (Vec<usize>, Vec<f64>) {
        let m = self.residual.rows();
        let mut chosen = vec![false; m];
        let mut order = Vec::with_capacity(width);
        let mut objective = self.base;
        let mut trajectory = vec![objective];
        let mut spent = 0.0;
        let affordable = |c: usize, spent: f64| match budget {
            Some((cost, limit)) => spent + cost[c] <= limit * (1.0 + 1e-12),
            None => true,
        };
        while order.len() < width {
            let norms = self.column_norms();
            let mut best: Option<(usize, f64)> = None;
            for &c in live {
                if chosen[c] || !affordable(c, spent) {
                    continue;
                }
                let d2 = self.residual.get(c, c) + self.tau[c];
                if !(d2 > self.spanned) {
                    continue;
                }
                let gain = norms[c] / d2;
                if best.is_none_or(|(_, g)| gain > g) {
                    best = Some((c, gain));
                }
            }
            let pick = match best {
                Some((c, _)) => Some(c),
                // everything left is already spanned: fill with admissible nodes in index order
                None => live.iter().copied().find(|&c| !chosen[c] && affordable(c, spent)),
            };
            let Some(c) = pick else { break };
            if best.is_some() {
                objective -= self.add(c);
            }
            chosen[c] = true;
            if let Some((cost, _)) = budget {
                spent += cost[c];
            }
            order.push(c);
            trajectory.push(objective.max(0.0));
        }
        (order, trajectory)
    }
}

/// Scaled next-layer weight rows used by the output information loss.
#[derive(Clone, Debug, Serialize)]
pub struct ZSpec {
    pub layer: usize,
    #[serde(skip)]
    pub z: Matrix,
    /// Rows of `Ŵ⁽ℓ⁾` that make up `z`, in order.
    pub rows: Vec<usize>,
    /// Output weights `q` aligned with `rows`; they sum to one.
    pub q: Vec<f64>,
}

fn row_norms(w: &Matrix) -> Vec<f64> {
    (0..w.rows()).map(|r| crate::numerics::dot(w.row(r), w.row(r)).sqrt()).collect()
}

/// `q_j ∝ 1/q̃_j` over `rows`, or uniform when no scores are given.
fn output_weights(rows: &[usize], next_leverage: Option<&[f64]>) -> Result<Vec<f64>> {
    let raw: Vec<f64> = match next_leverage {
        None => vec![1.0; rows.len()],
        Some(q) => rows
            .iter()
            .map(|&j| {
                if q[j] > 0.0 {
                    Ok(1.0 / q[j])
                } else {
                    Err(Error::InvalidParameter(format!("next-layer node {j} has zero leverage")))
                }
            })
            .collect::<Result<_>>()?,
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Backward-procedure `Z⁽ℓ⁾`: rows `√(m_ℓ q_{j_k}) Ŵ⁽ℓ⁾_{j_k,:} / max_j‖Ŵ⁽ℓ⁾_{j,:}‖`
/// for the nodes `j_k` kept in layer `ℓ+1`. Without leverage scores (the output
/// layer) `q` is uniform.
pub fn make_z_backward(net: &Network, l: usize, next_rows: &[usize], next_leverage: Option<&[f64]>) -> Result<ZSpec> {
    let w = &net.layer(l).weight;
    if next_rows.is_empty() {
        return Err(Error::InvalidParameter("next-layer selection is empty".into()));
    }
    let max_norm = row_norms(w).into_iter().fold(0.0, f64::max);
    if max_norm == 0.0 {
        return Err(Error::ZeroRowNorm);
    }
    let q = output_weights(next_rows, next_leverage)?;
    let m_l = net.node_shape(l).channels as f64;
    let mut z = select_rows(w, next_rows)?;
    for (k, &qk) in q.iter().enumerate() {
        let s = (m_l * qk).sqrt() / max_norm;
        z.row_mut(k).iter_mut().for_each(|v| *v *= s);
    }
    Ok(ZSpec {
        layer: l,
        z,
        rows: next_rows.to_vec(),
        q,
    })
}

/// Simultaneous-procedure `Z⁽ℓ⁾`: unit-normalized rows of `Ŵ⁽ℓ⁾`, with
/// `q_j ∝ 1/q̃⁽ℓ⁺¹⁾_j`. Zero rows and zero-leverage nodes are left out.
pub fn make_z_simultaneous(net: &Network, l: usize, next_leverage: Option<&[f64]>) -> Result<ZSpec> {
    let w = &net.layer(l).weight;
    let norms = row_norms(w);
    let rows: Vec<usize> = (0..w.rows())
        .filter(|&j| norms[j] > 0.0 && next_leverage.is_none_or(|q| q[j] > 0.0))
        .collect();
    if rows.is_empty() {
        return Err(Error::AllZeroRows);
    }
    let q = output_weights(&rows, next_leverage)?;
    let mut z = select_rows(w, &rows)?;
    for (k, &j) in rows.iter().enumerate() {
        z.row_mut(k).iter_mut().for_each(|v| *v /= norms[j]);
    }
    Ok(ZSpec { layer: l, z, rows, q })
}

/// Smallest `c` with `‖Ŵ⁽ℓ⁾_{j,:}‖² ≤ c R² q̃⁽ℓ⁺¹⁾_j` for every row with positive
/// leverage (uniform `q̃ = 1/m_{ℓ+1}` when none is given).
pub fn c_scale(net: &Network, l: usize, next_leverage: Option<&[f64]>, r: f64) -> f64 {
    let w = &net.layer(l).weight;
    let uniform = 1.0 / w.rows() as f64;
    row_norms(w)
        .iter()
        .enumerate()
        .filter_map(|(j, n)| {
            let q = next_leverage.map_or(uniform, |q| q[j]);
            (q > 0.0).then(|| n * n / (r * r * q))
        })
        .fold(0.0, f64::max)
}

/// Everything computed for one pruned layer.
#[derive(Clone, Debug)]
pub struct LayerPlan {
    pub layer: usize,
    pub cov: Arc<LayerCovariance>,
    pub lambda: f64,
    pub m_sharp: usize,
    pub leverage: LeverageScores,
    pub z: ZSpec,
    pub target: CrossCovariance,
}

/// Lazily computed covariances of the original network.
pub struct CovCache<'a> {
    net: &'a Network,
    data: &'a Dataset,
    covs: BTreeMap<usize, Arc<LayerCovariance>>,
}

impl<'a> CovCache<'a> {
    pub fn new(net: &'a Network, data: &'a Dataset) -> Self {
        CovCache {
            net,
            data,
            covs: BTreeMap::new(),
        }
    }

    pub fn with_entries(net: &'a Network, data: &'a Dataset, covs: BTreeMap<usize, Arc<LayerCovariance>>) -> Self {
        CovCache { net, data, covs }
    }

    pub fn get(&mut self, l: usize) -> Result<Arc<LayerCovariance>> {
        if let Some(c) = self.covs.get(&l) {
            return Ok(c.clone());
        }
        let c = Arc::new(layer_cov(self.net, self.data, l)?);
        self.covs.insert(l, c.clone());
        Ok(c)
    }

    pub fn network(&self) -> &'a Network {
        self.net
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn entries(&self) -> &BTreeMap<usize, Arc<LayerCovariance>> {
        &self.covs
    }
}

/// Cross covariance for `Z`, from `Σ̂` directly when layer `ℓ` is a flat vector.
pub fn output_target(net: &Network, data: &Dataset, cov: &LayerCovariance, z: &Matrix) -> Result<CrossCovariance> {
    let l = cov.layer;
    if net.node_shape(l).spatial() == 1 && matches!(net.layer(l).kind, LayerKind::Dense) {
        CrossCovariance::from_dense(cov, z)
    } else {
        output_channel_cov(net, data, l, z)
    }
}

/// Result of [`prune`].
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub network: Network,
    pub selections: Vec<SelectionResult>,
    pub plans: Vec<LayerPlan>,
    pub config: PruneConfig,
    pub covariances: BTreeMap<usize, Arc<LayerCovariance>>,
}

impl PruneOutcome {
    pub fn infeasible_layers(&self) -> Vec<usize> {
        self.selections.iter().filter(|s| !s.feasible).map(|s| s.layer).collect()
    }

    /// Turns the first infeasible layer into an error.
    pub fn check_feasible(&self) -> Result<()> {
        match self.selections.iter().find(|s| !s.feasible) {
            Some(s) => Err(Error::Infeasible {
                layer: s.layer,
                selected: s.indices.len(),
                requested: s.m_sharp,
            }),
            None => Ok(()),
        }
    }

    pub fn selection(&self, l: usize) -> Option<&SelectionResult> {
        self.selections.iter().find(|s| s.layer == l)
    }

    pub fn plan(&self, l: usize) -> Option<&LayerPlan> {
        self.plans.iter().find(|p| p.layer == l)
    }

    pub fn resolved(&self) -> ResolvedLayers {
        self.plans.iter().map(|p| (p.layer, (p.lambda, p.m_sharp, p.leverage.clone()))).collect()
    }

    pub fn selected_sets(&self) -> BTreeMap<usize, Vec<usize>> {
        self.selections.iter().map(|s| (s.layer, s.indices.clone())).collect()
    }
}

/// Resolves `(m♯, λ)` for one layer.
pub fn resolve_width(cov: &LayerCovariance, policy: WidthPolicy) -> Result<(usize, f64)> {
    match policy {
        WidthPolicy::Width(w) => Ok((w, lambda_for_width(cov, w)?)),
        WidthPolicy::LambdaCoef(c) => {
            let lambda = c * cov.trace();
            Ok((width_for_lambda(cov, lambda)?, lambda))
        }
        WidthPolicy::WidthAndLambdaCoef { width, coef } => Ok((width, coef * cov.trace())),
    }
}

/// Nodes of layer `ℓ+1` feeding the output loss of layer `ℓ`, with their leverage
/// scores (`None` when `ℓ = L`, where every output is kept with uniform weight).
pub fn next_layer_info(
    net: &Network,
    cache: &mut CovCache,
    cfg: &PruneConfig,
    plans: &ResolvedLayers,
    selections: &BTreeMap<usize, Vec<usize>>,
    l: usize,
) -> Result<(Vec<usize>, Option<Vec<f64>>)> {
    if l == net.depth() {
        return Ok(((0..net.output_dim()).collect(), None));
    }
    let lev = match plans.get(&(l + 1)) {
        Some((_, _, lev)) => lev.clone(),
        None => {
            let cov = cache.get(l + 1)?;
            leverage(&cov, cfg.default_lambda_coef * cov.trace())?
        }
    };
    let rows = match selections.get(&(l + 1)) {
        Some(j) => j.clone(),
        None => lev.support(),
    };
    Ok((rows, Some(lev.scores)))
}

/// `(λ, m♯, q̃)` of every pruned layer.
pub type ResolvedLayers = BTreeMap<usize, (f64, usize, LeverageScores)>;

/// `Z⁽ℓ⁾` for the configured procedure, with the next layer's leverage scores.
pub fn build_z(
    net: &Network,
    cache: &mut CovCache,
    cfg: &PruneConfig,
    resolved: &ResolvedLayers,
    selections: &BTreeMap<usize, Vec<usize>>,
    l: usize,
) -> Result<(ZSpec, Option<Vec<f64>>)> {
    match cfg.procedure {
        Procedure::Backward => {
            let (rows, q) = next_layer_info(net, cache, cfg, resolved, selections, l)?;
            Ok((make_z_backward(net, l, &rows, q.as_deref())?, q))
        }
        Procedure::Simultaneous => {
            // selections of other layers must not leak into Z here
            let (_, q) = next_layer_info(net, cache, cfg, resolved, &BTreeMap::new(), l)?;
            Ok((make_z_simultaneous(net, l, q.as_deref())?, q))
        }
    }
}

/// Prunes the layers listed in `cfg` and rebuilds the network.
pub fn prune(net: &Network, data: &Dataset, cfg: &PruneConfig) -> Result<PruneOutcome> {
    prune_cached(&mut CovCache::new(net, data), cfg)
}

/// [`prune`] reusing the covariances held by `cache`.
pub fn prune_cached(cache: &mut CovCache, cfg: &PruneConfig) -> Result<PruneOutcome> {
    let (net, data) = (cache.net, cache.data);
    cfg.validate(net)?;
    let mut resolved = BTreeMap::new();
    for (&l, &policy) in &cfg.layers {
        let cov = cache.get(l)?;
        let (m_sharp, lambda) = resolve_width(&cov, policy)?;
        let lev = leverage(&cov, lambda)?;
        resolved.insert(l, (lambda, m_sharp, lev));
    }

    let mut selections: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut results = Vec::new();
    let mut plans = Vec::new();
    for &l in cfg.layers.keys().rev() {
        let cov = cache.get(l)?;
        let (lambda, m_sharp, lev) = resolved[&l].clone();
        let (z, _) = build_z(net, cache, cfg, &resolved, &selections, l)?;
        let target = output_target(net, data, &cov, &z.z)?;
        let params = SelectParams {
            theta: cfg.theta,
            m_sharp,
            lambda,
            tau: cfg.tau,
            budget_constraint: cfg.budget_constraint,
        };
        let sel = greedy_select(&cov, Some(&target), &params)?;
        selections.insert(l, sel.indices.clone());
        plans.push(LayerPlan {
            layer: l,
            cov: cov.clone(),
            lambda,
            m_sharp,
            leverage: lev,
            z,
            target,
        });
        results.push(sel);
    }
    results.reverse();
    plans.reverse();
    let chosen: BTreeMap<usize, (&[usize], &Matrix)> =
        results.iter().map(|s| (s.layer, (s.indices.as_slice(), &s.a_hat))).collect();
    let network = compress(net, &chosen)?;
    Ok(PruneOutcome {
        network,
        selections: results,
        plans,
        config: cfg.clone(),
        covariances: cache.entries().clone(),
    })
}

/// Builds `W♯⁽ℓ⁾ = Ŵ⁽ℓ⁾_{J⁽ℓ⁺¹⁾,F} Â⁽ℓ⁾` and `b♯⁽ℓ⁾ = b̂⁽ℓ⁾_{J⁽ℓ⁺¹⁾}` for every layer.
/// Columns of a layer fed by a `C`-channel map are grouped per channel, so `Â`
/// acts on each kernel tap (or spatial position) separately.
pub fn compress(net: &Network, chosen: &BTreeMap<usize, (&[usize], &Matrix)>) -> Result<Network> {
    let mut layers = Vec::with_capacity(net.depth());
    for k in 1..=net.depth() {
        let layer = net.layer(k);
        let (mut weight, bias) = match chosen.get(&(k + 1)) {
            Some((rows, _)) => (select_rows(&layer.weight, rows)?, rows.iter().map(|&r| layer.bias[r]).collect()),
            None => (layer.weight.clone(), layer.bias.clone()),
        };
        let mut kind = layer.kind;
        if let Some((cols, a_hat)) = chosen.get(&k) {
            let channels = net.node_shape(k).channels;
            weight = regroup_columns(&weight, a_hat, channels)?;
            if let LayerKind::Conv2d(ref mut g) = kind {
                g.in_channels = cols.len();
            }
        }
        layers.push(Layer {
            kind,
            weight,
            bias,
            activation: layer.activation,
        });
    }
    net.with_layers(layers)
}

/// `W♯[o, j′·P + p] = Σ_k W[o, k·P + p] Â[k, j′]` with `P = cols / channels`.
fn regroup_columns(w: &Matrix, a_hat: &Matrix, channels: usize) -> Result<Matrix> {
    if a_hat.rows() != channels || w.cols() % channels != 0 {
        return Err(Error::ShapeMismatch(format!(
            "cannot regroup {} columns over {channels} channels with Â of {:?}",
            w.cols(),
            a_hat.shape()
        )));
    }
    let p = w.cols() / channels;
    if p == 1 {
        return w.matmul(a_hat);
    }
    let kept = a_hat.cols();
    let mut out = Matrix::zeros(w.rows(), kept * p);
    for o in 0..w.rows() {
        let block = Matrix::from_vec(channels, p, w.row(o).to_vec())?;
        let mixed = a_hat.t_matmul(&block)?;
        out.row_mut(o).copy_from_slice(mixed.as_slice());
    }
    Ok(out)
}

/// `‖f_a − f_b‖_n = √((1/n) Σᵢ ‖f_a(xᵢ) − f_b(xᵢ)‖²)`.
pub fn compression_error(a: &Network, b: &Network, data: &Dataset) -> Result<f64> {
    if a.input_dim() != b.input_dim() || a.output_dim() != b.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "networks map {}→{} and {}→{}",
            a.input_dim(),
            a.output_dim(),
            b.input_dim(),
            b.output_dim()
        )));
    }
    let fa = a.forward_batch(&data.inputs)?;
    let fb = b.forward_batch(&data.inputs)?;
    let sq: f64 = fa.as_slice().iter().zip(fb.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / data.len() as f64).sqrt())
}

/// `‖f‖_n`.
pub fn output_norm(net: &Network, data: &Dataset) -> Result<f64> {
    let f = net.forward_batch(&data.inputs)?;
    Ok((f.as_slice().iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt())
}
