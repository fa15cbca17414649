//! Vector fields of the coupled feature-topology system.
//!
//! - Directed consensus flow `dH/dt = -(I - P)H` on a fixed operator.
//! - Soft-attention flow, where `P(t)` is a feature-dependent softmax.
//! - Double-well edge-potential dynamics `tau_topo dU/dt = (1-lambda)U - U^3 + F`.
//! - The sigmoid gate mapping latent potentials to effective edge weights.
//! - The full coupled system combining all of the above, with an exact
//!   vector-Jacobian product for discretize-then-optimize training.
//!
//! Field evaluations are pure functions of `(t, y)`; the effective adjacency
//! is rebuilt inside every evaluation rather than cached across stages.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::force::{ForceField, ForceGradients};
use crate::graph::{row_normalize, CandidatePool, GraphError, RowStochasticMatrix};
use crate::solver::{OdeField, OdeState, StateLayout};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("non-finite state entry")]
    NonFiniteState,
}

/// Force magnitude at which the double well's saddle-node (fold) bifurcation
/// occurs, generalized to well depth `lambda`: `2 * ((1 - lambda)/3)^(3/2)`.
///
/// At `lambda = 0` this is `2 / (3 sqrt(3))`.
pub fn critical_force(lambda: f64) -> f64 {
    assert!((0.0..1.0).contains(&lambda), "lambda in [0, 1)");
    2.0 * ((1.0 - lambda) / 3.0).powf(1.5)
}

/// `F_crit` at the paper's base case `lambda = 0`: `2 / (3 sqrt(3))`.
pub fn critical_force_zero() -> f64 {
    critical_force(0.0)
}

/// Annealing schedule `mu(t)`: monotone non-increasing multiplier inside the
/// gate, from `mu_start` down to `mu_end` at `t_end` (clamped thereafter).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnealKind {
    Constant,
    Linear,
    Cosine,
}

impl AnnealKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Self::Constant),
            "linear" => Some(Self::Linear),
            "cosine" => Some(Self::Cosine),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealSchedule {
    pub kind: AnnealKind,
    pub mu_start: f64,
    pub mu_end: f64,
    pub t_end: f64,
}

impl AnnealSchedule {
    pub fn constant(mu: f64) -> Self {
        Self { kind: AnnealKind::Constant, mu_start: mu, mu_end: mu, t_end: 1.0 }
    }

    pub fn linear(mu_start: f64, mu_end: f64, t_end: f64) -> Self {
        Self { kind: AnnealKind::Linear, mu_start, mu_end, t_end }
    }

    pub fn cosine(mu_start: f64, mu_end: f64, t_end: f64) -> Self {
        Self { kind: AnnealKind::Cosine, mu_start, mu_end, t_end }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(0.0..=1.0).contains(&self.mu_start) || !(0.0..=1.0).contains(&self.mu_end) {
            return Err(DynamicsError::InvalidParam("mu bounds must lie in [0,1]".into()));
        }
        if self.mu_end > self.mu_start {
            return Err(DynamicsError::InvalidParam("mu must be non-increasing".into()));
        }
        if self.t_end <= 0.0 {
            return Err(DynamicsError::InvalidParam("t_end must be positive".into()));
        }
        Ok(())
    }
}

/// Evaluate the schedule at time `t >= 0`.
pub fn anneal_mu(schedule: &AnnealSchedule, t: f64) -> f64 {
    let frac = (t / schedule.t_end).clamp(0.0, 1.0);
    match schedule.kind {
        AnnealKind::Constant => schedule.mu_start,
        AnnealKind::Linear => schedule.mu_start + (schedule.mu_end - schedule.mu_start) * frac,
        AnnealKind::Cosine => {
            let w = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
            schedule.mu_end + (schedule.mu_start - schedule.mu_end) * w
        }
    }
}

/// Scalar knobs of the coupled system.
#[derive(Debug, Clone, PartialEq)]
pub struct HgodeParams {
    /// Well-depth control, in `[0, 1)`.
    pub lambda: f64,
    /// Sigmoid gate temperature.
    pub tau_gate: f64,
    /// Feature timescale.
    pub tau_feat: f64,
    /// Topology timescale.
    pub tau_topo: f64,
    /// Feature decay coefficient.
    pub gamma: f64,
    /// Self-loop weight injected at normalization.
    pub epsilon: f64,
    /// Force output scale `s` (used when initializing the force field).
    pub force_scale: f64,
    pub mu_schedule: AnnealSchedule,
}

impl Default for HgodeParams {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            tau_gate: 0.2,
            tau_feat: 1.0,
            tau_topo: 1.0,
            gamma: 0.0,
            epsilon: crate::graph::DEFAULT_EPSILON,
            force_scale: 1.0,
            mu_schedule: AnnealSchedule::constant(1.0),
        }
    }
}

impl HgodeParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(DynamicsError::InvalidParam("lambda must lie in [0, 1)".into()));
        }
        for (name, v) in [
            ("tau_gate", self.tau_gate),
            ("tau_feat", self.tau_feat),
            ("tau_topo", self.tau_topo),
            ("force_scale", self.force_scale),
        ] {
            if v <= 0.0 {
                return Err(DynamicsError::InvalidParam(format!("{name} must be positive")));
            }
        }
        if self.gamma < 0.0 || self.epsilon < 0.0 {
            return Err(DynamicsError::InvalidParam(
                "gamma and epsilon must be nonnegative".into(),
            ));
        }
        self.mu_schedule.validate()
    }
}

/// Coupled state: node features plus one latent potential per pool slot.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub features: Array2<f64>,
    pub potentials: Vec<f64>,
}

impl CoupledState {
    pub fn new(features: Array2<f64>, potentials: Vec<f64>) -> Self {
        Self { features, potentials }
    }

    /// Features at `h0`, all potentials at a common `u0`.
    pub fn from_initial(features: Array2<f64>, pool_len: usize, u0: f64) -> Self {
        Self { features, potentials: vec![u0; pool_len] }
    }

    pub fn validate(&self, pool: &CandidatePool) -> Result<(), DynamicsError> {
        if self.potentials.len() != pool.len() || self.features.nrows() != pool.n_nodes() {
            return Err(DynamicsError::InvalidParam(
                "state dimensions inconsistent with the pool".into(),
            ));
        }
        if self.features.iter().any(|v| !v.is_finite())
            || self.potentials.iter().any(|v| !v.is_finite())
        {
            return Err(DynamicsError::NonFiniteState);
        }
        Ok(())
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(&[
            ("H", self.features.len()),
            ("U", self.potentials.len()),
        ])
    }

    /// Flatten into a solver state (`H` row-major, then `U`).
    pub fn pack(&self) -> OdeState {
        let mut y = Vec::with_capacity(self.features.len() + self.potentials.len());
        y.extend(self.features.iter().copied());
        y.extend(self.potentials.iter().copied());
        OdeState::new(y, self.layout())
    }

    pub fn unpack(y: &[f64], n_nodes: usize, feat_dim: usize) -> Self {
        let nm = n_nodes * feat_dim;
        let features =
            Array2::from_shape_vec((n_nodes, feat_dim), y[..nm].to_vec()).expect("shape");
        let potentials = y[nm..].to_vec();
        Self { features, potentials }
    }
}

/// Consensus flow derivative `-(I - P)H = PH - H`.
///
/// Constant columns (the rank-one consensus subspace) map to zero.
pub fn consensus_field(p: &RowStochasticMatrix, h: &ArrayView2<f64>) -> Array2<f64> {
    p.matrix().dot(h) - h
}

fn softmax_rows(scores: &mut Array2<f64>, tau: f64) {
    let n = scores.nrows();
    for i in 0..n {
        let mut row = scores.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Fully-connected softmax attention operator
/// `P_ij = exp(<h_i, h_j>/tau) / sum_k exp(<h_i, h_k>/tau)`,
/// computed with per-row max subtraction for overflow safety.
pub fn soft_attention_matrix(h: &ArrayView2<f64>, tau_attn: f64) -> RowStochasticMatrix {
    assert!(tau_attn > 0.0, "tau_attn must be positive");
    let mut scores = h.dot(&h.t());
    softmax_rows(&mut scores, tau_attn);
    RowStochasticMatrix::from_normalized(scores)
}

/// Double-well edge dynamics `((1 - lambda) U - U^3 + F) / tau_topo`.
pub fn double_well_field(u: &[f64], f: &[f64], lambda: f64, tau_topo: f64) -> Vec<f64> {
    assert_eq!(u.len(), f.len(), "U and F must have equal length");
    u.iter()
        .zip(f)
        .map(|(&ui, &fi)| ((1.0 - lambda) * ui - ui * ui * ui + fi) / tau_topo)
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Effective adjacency `A_ij = mu * sigmoid(U_ij / tau_gate)` on pool pairs,
/// zero elsewhere. All entries lie in `[0, mu]`.
pub fn gate(
    u: &[f64],
    pool: &CandidatePool,
    tau_gate: f64,
    mu: f64,
    n_nodes: usize,
) -> Array2<f64> {
    assert_eq!(u.len(), pool.len(), "U must be indexed by the pool");
    assert!(tau_gate > 0.0 && (0.0..=1.0).contains(&mu));
    let mut a = Array2::zeros((n_nodes, n_nodes));
    for (k, &(i, j)) in pool.pairs().iter().enumerate() {
        a[[i, j]] = mu * sigmoid(u[k] / tau_gate);
    }
    a
}

/// Separable Landau-type topology energy
/// `sum_k U_k^4/4 - (1 - lambda) U_k^2/2 - F_k U_k`.
///
/// The U-flow with frozen features is exact gradient descent on this energy.
pub fn topology_energy(u: &[f64], f: &[f64], lambda: f64) -> f64 {
    u.iter()
        .zip(f)
        .map(|(&ui, &fi)| 0.25 * ui.powi(4) - 0.5 * (1.0 - lambda) * ui * ui - fi * ui)
        .sum()
}

/// Regularized Dirichlet-type feature energy
/// `1/2 Tr(H^T (I - P) H) + gamma/2 ||H||_F^2` (diagnostic only; the flow is
/// its exact gradient only for symmetric `P`).
pub fn feature_energy(h: &ArrayView2<f64>, p: &RowStochasticMatrix, gamma: f64) -> f64 {
    let ph = p.matrix().dot(h);
    let mut dirichlet = 0.0;
    let mut norm_sq = 0.0;
    for (hv, pv) in h.iter().zip(ph.iter()) {
        dirichlet += hv * (hv - pv);
        norm_sq += hv * hv;
    }
    0.5 * dirichlet + 0.5 * gamma * norm_sq
}

/// The full coupled system as a reusable field with scratch buffers.
///
/// State layout: `H` (row-major `n_nodes x feat_dim`), then `U` (pool slots).
pub struct HgodeSystem<'a> {
    pub params: &'a HgodeParams,
    pub pool: &'a CandidatePool,
    pub force: &'a ForceField,
    pub n_nodes: usize,
    pub feat_dim: usize,
    /// Ablation switch: `false` removes the cubic term (single-well
    /// relaxation, no bistability).
    pub cubic_term: bool,
    gate_w: Vec<f64>,
    row_sum: Vec<f64>,
    force_vals: Vec<f64>,
}

impl<'a> HgodeSystem<'a> {
    pub fn new(
        params: &'a HgodeParams,
        pool: &'a CandidatePool,
        force: &'a ForceField,
        feat_dim: usize,
    ) -> Self {
        let n_nodes = pool.n_nodes();
        Self {
            params,
            pool,
            force,
            n_nodes,
            feat_dim,
            cubic_term: true,
            gate_w: vec![0.0; pool.len()],
            row_sum: vec![0.0; n_nodes],
            force_vals: vec![0.0; pool.len()],
        }
    }

    pub fn with_cubic_off(mut self) -> Self {
        self.cubic_term = false;
        self
    }

    pub fn dim(&self) -> usize {
        self.n_nodes * self.feat_dim + self.pool.len()
    }

    fn fill_gate_and_rows(&mut self, t: f64, u: &[f64]) -> Result<(), GraphError> {
        let mu = anneal_mu(&self.params.mu_schedule, t);
        for (k, &uk) in u.iter().enumerate() {
            self.gate_w[k] = mu * sigmoid(uk / self.params.tau_gate);
        }
        self.row_sum.fill(self.params.epsilon);
        for (k, &(i, _)) in self.pool.pairs().iter().enumerate() {
            self.row_sum[i] += self.gate_w[k];
        }
        if let Some(row) = self.row_sum.iter().position(|&d| d <= 0.0) {
            return Err(GraphError::ZeroRow { row });
        }
        Ok(())
    }

    /// Field evaluation with the fully-gated-off error surfaced.
    pub fn eval_checked(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), GraphError> {
        let (n, m) = (self.n_nodes, self.feat_dim);
        let nm = n * m;
        let (h, u) = y.split_at(nm);
        self.fill_gate_and_rows(t, u)?;
        self.force.eval_into(h, m, self.pool, &mut self.force_vals);

        // Feature block: ((P H)_i - (1 + gamma) H_i) / tau_feat with
        // (P H)_i = (eps H_i + sum_k w_k H_{dst k}) / d_i.
        let (dh, du) = dy.split_at_mut(nm);
        for i in 0..n {
            for c in 0..m {
                dh[i * m + c] = self.params.epsilon * h[i * m + c];
            }
        }
        for (k, &(i, j)) in self.pool.pairs().iter().enumerate() {
            let w = self.gate_w[k];
            for c in 0..m {
                dh[i * m + c] += w * h[j * m + c];
            }
        }
        let decay = 1.0 + self.params.gamma;
        for i in 0..n {
            let inv_d = 1.0 / self.row_sum[i];
            for c in 0..m {
                dh[i * m + c] =
                    (dh[i * m + c] * inv_d - decay * h[i * m + c]) / self.params.tau_feat;
            }
        }

        let one_minus_lambda = 1.0 - self.params.lambda;
        for k in 0..u.len() {
            let cubic = if self.cubic_term { u[k] * u[k] * u[k] } else { 0.0 };
            du[k] = (one_minus_lambda * u[k] - cubic + self.force_vals[k]) / self.params.tau_topo;
        }
        Ok(())
    }

    /// Exact vector-Jacobian product of the field.
    ///
    /// Accumulates `upstream^T dField/dy` into `y_bar` and
    /// `upstream^T dField/dtheta` into `force_grads`.
    pub fn vjp(
        &mut self,
        t: f64,
        y: &[f64],
        upstream: &[f64],
        y_bar: &mut [f64],
        force_grads: &mut ForceGradients,
    ) {
        let (n, m) = (self.n_nodes, self.feat_dim);
        let nm = n * m;
        let (h, u) = y.split_at(nm);
        let (v_h, v_u) = upstream.split_at(nm);
        self.fill_gate_and_rows(t, u)
            .expect("vjp requires well-defined rows (eps > 0 or live gates)");
        let mu = anneal_mu(&self.params.mu_schedule, t);

        // U-block diagonal and the force pullback.
        let one_minus_lambda = 1.0 - self.params.lambda;
        let inv_tt = 1.0 / self.params.tau_topo;
        {
            let (ybar_h, ybar_u) = y_bar.split_at_mut(nm);
            for k in 0..u.len() {
                let cubic_jac = if self.cubic_term { 3.0 * u[k] * u[k] } else { 0.0 };
                ybar_u[k] += v_u[k] * (one_minus_lambda - cubic_jac) * inv_tt;
            }
            let upstream_f: Vec<f64> = v_u.iter().map(|&v| v * inv_tt).collect();
            self.force
                .backward_into(h, m, self.pool, &upstream_f, force_grads, ybar_h);
        }

        // H-block, fixed P: H_bar += (P^T V - (1 + gamma) V) / tau_feat.
        let inv_tf = 1.0 / self.params.tau_feat;
        let decay = 1.0 + self.params.gamma;
        {
            let ybar_h = &mut y_bar[..nm];
            for i in 0..n {
                let p_ii = self.params.epsilon / self.row_sum[i];
                for c in 0..m {
                    ybar_h[i * m + c] += (p_ii - decay) * v_h[i * m + c] * inv_tf;
                }
            }
        }
        for (k, &(i, j)) in self.pool.pairs().iter().enumerate() {
            let p_ij = self.gate_w[k] / self.row_sum[i];
            for c in 0..m {
                y_bar[j * m + c] += p_ij * v_h[i * m + c] * inv_tf;
            }
        }

        // P_bar on the support, then through row normalization to the gate.
        // P_bar_ij = sum_c V[i,c] H[j,c] / tau_feat; rho_i = sum_l P_bar_il P_il.
        let mut rho = vec![0.0; n];
        for i in 0..n {
            let mut pbar_ii = 0.0;
            for c in 0..m {
                pbar_ii += v_h[i * m + c] * h[i * m + c];
            }
            pbar_ii *= inv_tf;
            rho[i] = pbar_ii * (self.params.epsilon / self.row_sum[i]);
        }
        let mut pbar_pool = vec![0.0; self.pool.len()];
        for (k, &(i, j)) in self.pool.pairs().iter().enumerate() {
            let mut pbar = 0.0;
            for c in 0..m {
                pbar += v_h[i * m + c] * h[j * m + c];
            }
            pbar *= inv_tf;
            pbar_pool[k] = pbar;
            rho[i] += pbar * (self.gate_w[k] / self.row_sum[i]);
        }
        let inv_tg = 1.0 / self.params.tau_gate;
        let ybar_u = &mut y_bar[nm..];
        for (k, &(i, _)) in self.pool.pairs().iter().enumerate() {
            let a_bar = (pbar_pool[k] - rho[i]) / self.row_sum[i];
            let g = self.gate_w[k] / mu.max(f64::MIN_POSITIVE);
            let du = mu * g * (1.0 - g) * inv_tg;
            ybar_u[k] += a_bar * du;
        }
    }
}

impl OdeField for HgodeSystem<'_> {
    fn eval(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) {
        self.eval_checked(t, y, dydt)
            .expect("node fully gated off with eps = 0");
    }
}

/// One-shot coupled-field evaluation (allocating convenience form).
pub fn hgode_field(
    state: &CoupledState,
    t: f64,
    params: &HgodeParams,
    pool: &CandidatePool,
    force: &ForceField,
) -> Result<CoupledState, DynamicsError> {
    params.validate()?;
    state.validate(pool)?;
    let m = state.features.ncols();
    let mut sys = HgodeSystem::new(params, pool, force, m);
    let y = state.pack();
    let mut dy = vec![0.0; y.y.len()];
    sys.eval_checked(t, &y.y, &mut dy)?;
    Ok(CoupledState::unpack(&dy, pool.n_nodes(), m))
}

/// Soft-attention consensus flow `dH/dt = -(I - P(H)) H` as a solver field.
pub struct SoftAttentionSystem {
    pub tau_attn: f64,
    pub n_nodes: usize,
    pub feat_dim: usize,
}

impl SoftAttentionSystem {
    pub fn new(tau_attn: f64, n_nodes: usize, feat_dim: usize) -> Self {
        assert!(tau_attn > 0.0);
        Self { tau_attn, n_nodes, feat_dim }
    }
}

impl OdeField for SoftAttentionSystem {
    fn eval(&mut self, _t: f64, y: &[f64], dydt: &mut [f64]) {
        let (n, m) = (self.n_nodes, self.feat_dim);
        let h = ArrayView2::from_shape((n, m), y).expect("shape");
        let p = soft_attention_matrix(&h, self.tau_attn);
        let dh = consensus_field(&p, &h);
        dydt.copy_from_slice(dh.as_slice().expect("contiguous"));
    }
}

/// Fixed-operator consensus flow as a solver field.
pub struct ConsensusSystem {
    pub p: RowStochasticMatrix,
    pub feat_dim: usize,
}

impl OdeField for ConsensusSystem {
    fn eval(&mut self, _t: f64, y: &[f64], dydt: &mut [f64]) {
        let n = self.p.n();
        let h = ArrayView2::from_shape((n, self.feat_dim), y).expect("shape");
        let dh = consensus_field(&self.p, &h);
        dydt.copy_from_slice(dh.as_slice().expect("contiguous"));
    }
}

/// Row-normalized effective operator at a given coupled state, as used inside
/// the field: `row_normalize(gate(U) + eps I)`.
pub fn effective_operator(
    state: &CoupledState,
    t: f64,
    params: &HgodeParams,
    pool: &CandidatePool,
) -> Result<RowStochasticMatrix, GraphError> {
    let mu = anneal_mu(&params.mu_schedule, t);
    let a = gate(&state.potentials, pool, params.tau_gate, mu, pool.n_nodes());
    row_normalize(&a, params.epsilon)
}

/// Effective gated adjacency at a given state and time (before normalization).
pub fn effective_adjacency(
    state: &CoupledState,
    t: f64,
    params: &HgodeParams,
    pool: &CandidatePool,
) -> Array2<f64> {
    let mu = anneal_mu(&params.mu_schedule, t);
    gate(&state.potentials, pool, params.tau_gate, mu, pool.n_nodes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::diameter;
    use crate::force::init_force;
    use crate::graph::{build_candidate_pool, Graph, PoolParams};
    use crate::rng::DetRng;
    use crate::solver::{dopri5_observed, SolverConfig};
    use ndarray::array;

    fn zero_force(m: usize) -> ForceField {
        let mut f = init_force(4, m, 1.0, 0, false).unwrap();
        f.zero_params();
        f
    }

    #[test]
    fn consensus_equal_rows_is_equilibrium() {
        let p = row_normalize(&array![[1.0, 2.0], [3.0, 1.0]], 0.0).unwrap();
        let h = array![[2.0, -1.0], [2.0, -1.0]];
        let d = consensus_field(&p, &h.view());
        assert!(d.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn consensus_identity_operator_is_zero() {
        let p = RowStochasticMatrix::try_new(Array2::<f64>::eye(3)).unwrap();
        let h = array![[1.0], [2.0], [3.0]];
        let d = consensus_field(&p, &h.view());
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn consensus_two_node_arithmetic() {
        let p = RowStochasticMatrix::try_new(array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let h = array![[1.0], [0.0]];
        let d = consensus_field(&p, &h.view());
        assert!((d[[0, 0]] + 0.5).abs() < 1e-15);
        assert!((d[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn consensus_rank_one_preservation() {
        let mut rng = DetRng::new(4);
        for _ in 0..20 {
            let n = 3 + rng.index(5);
            let a = Array2::from_shape_fn((n, n), |_| rng.uniform());
            let p = row_normalize(&a, 0.1).unwrap();
            let yrow: Vec<f64> = (0..4).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let h = Array2::from_shape_fn((n, 4), |(_, c)| yrow[c]);
            let d = consensus_field(&p, &h.view());
            // P1 = 1 exactly up to the row-sum roundoff.
            assert!(d.iter().all(|&v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn soft_attention_uniform_for_zero_features() {
        let h = Array2::zeros((4, 3));
        let p = soft_attention_matrix(&h.view(), 1.0);
        for v in p.matrix() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_attention_single_node() {
        let h = array![[3.0, -1.0]];
        let p = soft_attention_matrix(&h.view(), 0.7);
        assert_eq!(p.matrix()[[0, 0]], 1.0);
    }

    #[test]
    fn soft_attention_two_node_softmax() {
        let h = array![[1.0], [-1.0]];
        let p = soft_attention_matrix(&h.view(), 1.0);
        // scores row 0: <h0,h0>=1, <h0,h1>=-1 -> e^1/(e^1+e^-1)
        let expect = 1f64.exp() / (1f64.exp() + (-1f64).exp());
        assert!((p.matrix()[[0, 0]] - expect).abs() <= 1e-4);
        assert!((p.matrix()[[0, 0]] - 0.8808).abs() <= 1e-4);
        assert!((p.matrix()[[0, 1]] - 0.1192).abs() <= 1e-4);
    }

    #[test]
    fn soft_attention_corollary_lower_bound_holds() {
        let mut rng = DetRng::new(17);
        for _ in 0..100 {
            let n = 2 + rng.index(7);
            let m = 1 + rng.index(4);
            let h = Array2::from_shape_fn((n, m), |_| rng.uniform_in(-2.0, 2.0));
            let tau = rng.uniform_in(0.5, 5.0);
            let b_sq = (0..n)
                .map(|i| h.row(i).iter().map(|v| v * v).sum::<f64>())
                .fold(0.0, f64::max);
            let bound = (1.0 / n as f64) * (-2.0 * b_sq / tau).exp();
            let p = soft_attention_matrix(&h.view(), tau);
            let min = p.matrix().iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= bound, "min {min} < bound {bound}");
        }
    }

    #[test]
    fn double_well_examples() {
        assert_eq!(double_well_field(&[0.0], &[0.0], 0.0, 1.0), vec![0.0]);
        assert_eq!(double_well_field(&[1.0], &[0.0], 0.0, 1.0), vec![0.0]);
        let d = double_well_field(&[0.5], &[0.2], 0.0, 1.0);
        assert!((d[0] - 0.575).abs() < 1e-15);
    }

    #[test]
    fn anneal_examples() {
        let c = AnnealSchedule::constant(1.0);
        assert_eq!(anneal_mu(&c, 0.0), 1.0);
        assert_eq!(anneal_mu(&c, 123.0), 1.0);

        let l = AnnealSchedule::linear(1.0, 0.5, 10.0);
        assert!((anneal_mu(&l, 5.0) - 0.75).abs() < 1e-15);
        assert_eq!(anneal_mu(&l, 10.0), 0.5);
        assert_eq!(anneal_mu(&l, 50.0), 0.5);

        let cos = AnnealSchedule::cosine(0.9, 0.1, 4.0);
        assert!((anneal_mu(&cos, 0.0) - 0.9).abs() < 1e-15);
        assert!((anneal_mu(&cos, 4.0) - 0.1).abs() < 1e-15);
        // monotone non-increasing on a grid
        let mut prev = f64::INFINITY;
        for k in 0..100 {
            let v = anneal_mu(&cos, k as f64 * 0.05);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn gate_examples_and_range() {
        let g = Graph::new(3, [(0, 1), (1, 2)]).unwrap();
        let pool = build_candidate_pool(&g, &PoolParams::default(), 0).unwrap();

        let a = gate(&[0.0, 0.0], &pool, 0.2, 0.8, 3);
        assert!((a[[0, 1]] - 0.4).abs() < 1e-15, "sigmoid(0) * mu");

        let a = gate(&[0.0, 0.0], &pool, 0.2, 0.0, 3);
        assert!(a.iter().all(|&v| v == 0.0));

        let a = gate(&[1.0, -3.0], &pool, 0.2, 1.0, 3);
        assert!((a[[0, 1]] - 0.9933).abs() <= 1e-4, "sigmoid(5) = {}", a[[0, 1]]);
        // off-pool entries exactly zero, all entries within [0, mu]
        assert_eq!(a[[2, 0]], 0.0);
        assert_eq!(a[[0, 2]], 0.0);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn hgode_field_consensus_equilibrium_for_equal_rows() {
        let g = Graph::new(3, [(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap();
        let pool = build_candidate_pool(&g, &PoolParams::default(), 0).unwrap();
        let params = HgodeParams { gamma: 0.0, ..HgodeParams::default() };
        let force = zero_force(2);
        let h = Array2::from_shape_fn((3, 2), |(_, c)| if c == 0 { 1.5 } else { -0.5 });
        let state = CoupledState::from_initial(h, pool.len(), 0.3);
        let d = hgode_field(&state, 0.0, &params, &pool, &force).unwrap();
        assert!(d.features.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn hgode_field_degenerate_wells_are_stationary() {
        let g = Graph::new(2, [(0, 1), (1, 0)]).unwrap();
        let pool = build_candidate_pool(&g, &PoolParams::default(), 0).unwrap();
        let params = HgodeParams { lambda: 0.0, ..HgodeParams::default() };
        let force = zero_force(1);
        let state = CoupledState::new(array![[0.4], [0.1]], vec![1.0, -1.0]);
        let d = hgode_field(&state, 0.0, &params, &pool, &force).unwrap();
        assert!(d.potentials.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn hgode_field_two_node_pull_direction() {
        // Single directed edge (0,1) with an open gate pulls node 0 toward
        // node 1; node 1 has no inputs beyond its self-loop.
        let g = Graph::new(2, [(0, 1)]).unwrap();
        let pool = build_candidate_pool(&g, &PoolParams::default(), 0).unwrap();
        let params = HgodeParams {
            gamma: 0.0,
            epsilon: 1e-3,
            tau_gate: 0.2,
            ..HgodeParams::default()
        };
        let force = zero_force(1);
        let state = CoupledState::new(array![[1.0], [0.0]], vec![10.0]);
        let d = hgode_field(&state, 0.0, &params, &pool, &force).unwrap();
        assert!(d.features[[0, 0]] < -0.9, "node 0 pulled down: {}", d.features[[0, 0]]);
        assert!(d.features[[1, 0]].abs() < 1e-12);
        // hand-built 2x2 operator: dH_0 = eps/(1+eps)*... with gate ~ 1
        let gate_w = sigmoid(10.0 / 0.2);
        let expect = (1e-3 / (1e-3 + gate_w) - 1.0) * 1.0;
        assert!((d.features[[0, 0]] - expect).abs() < 1e-9);
    }

    #[test]
    fn hgode_field_fully_insulated_node_errors_without_eps() {
        let g = Graph::new(2, [(0, 1)]).unwrap();
        let pool = build_candidate_pool(&g, &PoolParams::default(), 0).unwrap();
        let params = HgodeParams { epsilon: 0.0, ..HgodeParams::default() };
        let force = zero_force(1);
        // Node 1 has no outgoing pool pairs at all: zero row with eps = 0.
        let state = CoupledState::new(array![[1.0], [0.0]], vec![0.0]);
        let r = hgode_field(&state, 0.0, &params, &pool, &force);
        assert!(
            matches!(r, Err(DynamicsError::Graph(GraphError::ZeroRow { row: 1 }))),
            "{r:?}"
        );
    }

    #[test]
    fn topology_energy_descends_along_u_flow() {
        // H frozen -> F frozen; the U-flow is exact gradient descent.
        let mut rng = DetRng::new(8);
        let n_slots = 12;
        let f: Vec<f64> = (0..n_slots).map(|_| rng.uniform_in(-0.6, 0.6)).collect();
        let u0: Vec<f64> = (0..n_slots).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let lambda = 0.3;
        let f_c = f.clone();
        let mut field = move |_t: f64, u: &[f64], du: &mut [f64]| {
            let d = double_well_field(u, &f_c, lambda, 1.0);
            du.copy_from_slice(&d);
        };
        let mut energies = vec![topology_energy(&u0, &f, lambda)];
        dopri5_observed(
            &mut field,
            &u0,
            0.0,
            30.0,
            &SolverConfig::with_tol(1e-8),
            &[],
            |_t, u| energies.push(topology_energy(u, &f, lambda)),
        )
        .unwrap();
        for w in energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "energy rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn diameter_contracts_under_uniformly_positive_switching_operators() {
        let mut rng = DetRng::new(23);
        for _ in 0..30 {
            let n = 3 + rng.index(5);
            let alpha_base = rng.uniform_in(0.02, 0.8 / n as f64);
            // Three pieces, each P = alpha*J + (1 - n*alpha) * random stochastic.
            let mut pieces = Vec::new();
            for _ in 0..3 {
                let raw = Array2::from_shape_fn((n, n), |_| rng.uniform());
                let q = row_normalize(&raw, 0.0).unwrap();
                let p = Array2::from_shape_fn((n, n), |(i, j)| {
                    alpha_base + (1.0 - n as f64 * alpha_base) * q.matrix()[[i, j]]
                });
                pieces.push(row_normalize(&p, 0.0).unwrap());
            }
            let alpha = pieces
                .iter()
                .flat_map(|p| p.matrix().iter().cloned())
                .fold(f64::INFINITY, f64::min);
            assert!(alpha >= alpha_base - 1e-12);

            let x0: Vec<f64> = (0..n).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
            let d0 = diameter(&x0);
            let mut x = x0;
            let piece_len = 1.2;
            for (pi, p) in pieces.iter().enumerate() {
                let mut sys = ConsensusSystem { p: p.clone(), feat_dim: 1 };
                let t0 = pi as f64 * piece_len;
                let save: Vec<f64> = (1..=6).map(|k| t0 + k as f64 * piece_len / 6.0).collect();
                let traj = crate::solver::integrate_dopri5(
                    &mut sys,
                    &crate::solver::OdeState::flat(x.clone()),
                    t0,
                    t0 + piece_len,
                    &SolverConfig::with_tol(1e-10),
                    &save,
                )
                .unwrap();
                for (t, state) in traj.times.iter().zip(&traj.states) {
                    let bound = (-2.0 * alpha * t).exp() * d0 * (1.0 + 1e-6);
                    let d = diameter(state);
                    assert!(d <= bound, "diam {d} > bound {bound} at t={t}");
                }
                x = traj.last_state().to_vec();
            }
        }
    }

    #[test]
    fn effective_operator_matches_manual_normalization() {
        let g = Graph::new(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let pool = build_candidate_pool(&g, &PoolParams::default(), 0).unwrap();
        let params = HgodeParams::default();
        let state = CoupledState::new(Array2::zeros((3, 2)), vec![0.5, -0.5, 0.0]);
        let p = effective_operator(&state, 0.0, &params, &pool).unwrap();
        let a = effective_adjacency(&state, 0.0, &params, &pool);
        let manual = row_normalize(&a, params.epsilon).unwrap();
        assert_eq!(p.matrix(), manual.matrix());
    }
}
