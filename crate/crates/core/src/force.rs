//! Learnable pairwise topological force.
//!
//! One hidden tanh layer on concatenated endpoint features, with a tanh
//! output squashed to `[-s, s]`:
//! `F_ij = s * tanh(w2 . tanh(W1^T [h_i || h_j] + b1) + b2)`.
//!
//! Reverse-mode gradients are written by hand and checked against central
//! finite differences in the test suite.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::critical_force;
use crate::graph::CandidatePool;
use crate::rng::DetRng;

#[derive(Debug, Error)]
pub enum ForceError {
    #[error("scale s = {scale} is below F_crit = {f_crit}: deterministic switching is unreachable")]
    InvalidScale { scale: f64, f_crit: f64 },
    #[error("invalid force parameter: {0}")]
    Invalid(String),
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

/// Two-layer perceptron force with tanh output scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceField {
    /// Input weights, `(2m x hidden)`.
    pub w1: Array2<f64>,
    /// Hidden biases, length `hidden`.
    pub b1: Vec<f64>,
    /// Output weights, length `hidden`.
    pub w2: Vec<f64>,
    /// Output bias.
    pub b2: f64,
    /// Output scale `s`; outputs lie in `[-s, s]`.
    pub scale: f64,
}

impl ForceField {
    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.w1.nrows() / 2
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn zero_params(&mut self) {
        self.w1.fill(0.0);
        self.b1.fill(0.0);
        self.w2.fill(0.0);
        self.b2 = 0.0;
    }

    /// Flatten parameters in a fixed order (w1 row-major, b1, w2, b2).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.w1.iter().copied());
        out.extend(self.b1.iter().copied());
        out.extend(self.w2.iter().copied());
        out.push(self.b2);
        out
    }

    pub fn set_params_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter();
        for v in self.w1.iter_mut() {
            *v = *it.next().unwrap();
        }
        for v in self.b1.iter_mut() {
            *v = *it.next().unwrap();
        }
        for v in self.w2.iter_mut() {
            *v = *it.next().unwrap();
        }
        self.b2 = *it.next().unwrap();
    }

    /// Force for a single feature pair.
    pub fn eval_pair(&self, hi: &[f64], hj: &[f64]) -> f64 {
        let m = self.feat_dim();
        assert_eq!(hi.len(), m);
        assert_eq!(hj.len(), m);
        let hd = self.hidden();
        let w1 = self.w1.as_slice().expect("contiguous");
        let mut pre2 = self.b2;
        let mut z = vec![0.0; hd];
        for a in 0..hd {
            z[a] = self.b1[a];
        }
        for (r, &x) in hi.iter().chain(hj.iter()).enumerate() {
            if x != 0.0 {
                let row = &w1[r * hd..(r + 1) * hd];
                for a in 0..hd {
                    z[a] += row[a] * x;
                }
            }
        }
        for a in 0..hd {
            pre2 += self.w2[a] * z[a].tanh();
        }
        self.scale * pre2.tanh()
    }

    /// Pool-slot forces into a preallocated slice (`h` row-major `n x m`).
    pub fn eval_into(&self, h: &[f64], m: usize, pool: &CandidatePool, out: &mut [f64]) {
        assert_eq!(out.len(), pool.len());
        assert_eq!(m, self.feat_dim(), "feature dim mismatch");
        let hd = self.hidden();
        let w1 = self.w1.as_slice().expect("contiguous");
        let mut z = vec![0.0; hd];
        for (k, &(i, j)) in pool.pairs().iter().enumerate() {
            z.copy_from_slice(&self.b1);
            let hi = &h[i * m..(i + 1) * m];
            let hj = &h[j * m..(j + 1) * m];
            for (r, &x) in hi.iter().chain(hj.iter()).enumerate() {
                let row = &w1[r * hd..(r + 1) * hd];
                for a in 0..hd {
                    z[a] += row[a] * x;
                }
            }
            let mut pre2 = self.b2;
            for a in 0..hd {
                pre2 += self.w2[a] * z[a].tanh();
            }
            out[k] = self.scale * pre2.tanh();
        }
    }

    /// Reverse-mode through all pool slots.
    ///
    /// Accumulates parameter gradients into `grads` (w1/b1/w2/b2 fields) and
    /// feature gradients into `h_bar` (row-major `n x m`, both endpoint
    /// contributions per pair).
    pub fn backward_into(
        &self,
        h: &[f64],
        m: usize,
        pool: &CandidatePool,
        upstream: &[f64],
        grads: &mut ForceGradients,
        h_bar: &mut [f64],
    ) {
        assert_eq!(upstream.len(), pool.len());
        assert_eq!(m, self.feat_dim());
        let hd = self.hidden();
        let w1 = self.w1.as_slice().expect("contiguous");
        let dw1 = grads.dw1.as_slice_mut().expect("contiguous");
        let mut z = vec![0.0; hd];
        let mut tz = vec![0.0; hd];
        let mut dpre1 = vec![0.0; hd];
        for (k, &(i, j)) in pool.pairs().iter().enumerate() {
            let up = upstream[k];
            if up == 0.0 {
                continue;
            }
            z.copy_from_slice(&self.b1);
            let hi = &h[i * m..(i + 1) * m];
            let hj = &h[j * m..(j + 1) * m];
            for (r, &x) in hi.iter().chain(hj.iter()).enumerate() {
                let row = &w1[r * hd..(r + 1) * hd];
                for a in 0..hd {
                    z[a] += row[a] * x;
                }
            }
            let mut pre2 = self.b2;
            for a in 0..hd {
                tz[a] = z[a].tanh();
                pre2 += self.w2[a] * tz[a];
            }
            let t2 = pre2.tanh();
            let g2 = up * self.scale * (1.0 - t2 * t2);
            grads.db2 += g2;
            for a in 0..hd {
                grads.dw2[a] += g2 * tz[a];
                dpre1[a] = g2 * self.w2[a] * (1.0 - tz[a] * tz[a]);
                grads.db1[a] += dpre1[a];
            }
            for (r, &x) in hi.iter().chain(hj.iter()).enumerate() {
                let row = &w1[r * hd..(r + 1) * hd];
                let drow = &mut dw1[r * hd..(r + 1) * hd];
                let mut dx = 0.0;
                for a in 0..hd {
                    drow[a] += dpre1[a] * x;
                    dx += row[a] * dpre1[a];
                }
                let node = if r < m { i } else { j };
                let c = if r < m { r } else { r - m };
                h_bar[node * m + c] += dx;
            }
        }
    }
}

/// Gradients of a scalar objective with respect to the force parameters and
/// the node features.
#[derive(Debug, Clone)]
pub struct ForceGradients {
    pub dw1: Array2<f64>,
    pub db1: Vec<f64>,
    pub dw2: Vec<f64>,
    pub db2: f64,
    /// dLoss/dH contributions, `(n_nodes x m)`.
    pub dh: Array2<f64>,
}

impl ForceGradients {
    pub fn zeros(force: &ForceField, n_nodes: usize) -> Self {
        Self {
            dw1: Array2::zeros(force.w1.dim()),
            db1: vec![0.0; force.b1.len()],
            dw2: vec![0.0; force.w2.len()],
            db2: 0.0,
            dh: Array2::zeros((n_nodes, force.feat_dim())),
        }
    }

    pub fn zero(&mut self) {
        self.dw1.fill(0.0);
        self.db1.fill(0.0);
        self.dw2.fill(0.0);
        self.db2 = 0.0;
        self.dh.fill(0.0);
    }

    /// Flatten parameter gradients in the [`ForceField::flatten_params`] order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dw1.len() + self.db1.len() + self.dw2.len() + 1);
        out.extend(self.dw1.iter().copied());
        out.extend(self.db1.iter().copied());
        out.extend(self.dw2.iter().copied());
        out.push(self.db2);
        out
    }
}

/// Force values per pool slot (public operation form).
pub fn force_eval(force: &ForceField, h: &ArrayView2<f64>, pool: &CandidatePool) -> Vec<f64> {
    let mut out = vec![0.0; pool.len()];
    let hs = h.as_slice().expect("contiguous row-major H");
    force.eval_into(hs, h.ncols(), pool, &mut out);
    out
}

/// Exact reverse-mode gradients w.r.t. parameters and features.
pub fn force_backward(
    force: &ForceField,
    h: &ArrayView2<f64>,
    pool: &CandidatePool,
    upstream: &[f64],
) -> ForceGradients {
    let n = h.nrows();
    let m = h.ncols();
    let mut grads = ForceGradients::zeros(force, n);
    let mut h_bar = vec![0.0; n * m];
    let hs = h.as_slice().expect("contiguous row-major H");
    force.backward_into(hs, m, pool, upstream, &mut grads, &mut h_bar);
    grads.dh = Array2::from_shape_vec((n, m), h_bar).expect("shape");
    grads
}

/// Initialize with uniform `(+-1/sqrt(fan_in))` weights and zero biases;
/// deterministic per seed.
///
/// A scale below `F_crit` cannot drive deterministic switching; with
/// `strict_scale` this is a hard error, otherwise a warning.
pub fn init_force(
    hidden: usize,
    feat_dim: usize,
    scale: f64,
    seed: u64,
    strict_scale: bool,
) -> Result<ForceField, ForceError> {
    if hidden == 0 {
        return Err(ForceError::Invalid("hidden width must be >= 1".into()));
    }
    if scale <= 0.0 {
        return Err(ForceError::Invalid("scale must be positive".into()));
    }
    let f_crit = critical_force(0.0);
    if scale < f_crit {
        if strict_scale {
            return Err(ForceError::InvalidScale { scale, f_crit });
        }
        eprintln!(
            "warning: force scale s = {scale} < F_crit = {f_crit:.7}; \
             deterministic edge switching is unreachable"
        );
    }
    let mut rng = DetRng::new(seed);
    let bound1 = 1.0 / ((2 * feat_dim) as f64).sqrt();
    let w1 = Array2::from_shape_fn((2 * feat_dim, hidden), |_| rng.uniform_in(-bound1, bound1));
    let bound2 = 1.0 / (hidden as f64).sqrt();
    let w2 = (0..hidden).map(|_| rng.uniform_in(-bound2, bound2)).collect();
    Ok(ForceField {
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: 0.0,
        scale,
    })
}

/// Named array with an explicit shape header, for JSON checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn vector(v: &[f64]) -> Self {
        Self { shape: vec![v.len()], data: v.to_vec() }
    }

    pub fn matrix(m: &Array2<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>, ForceError> {
        if self.shape.len() != 2 {
            return Err(ForceError::Format("expected rank-2 array".into()));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| ForceError::Format(e.to_string()))
    }
}

/// Checkpoint of named arrays; sorted keys for diff stability.
pub type Checkpoint = BTreeMap<String, NamedArray>;

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), ForceError> {
    let text = serde_json::to_string_pretty(checkpoint)
        .map_err(|e| ForceError::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ForceError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ForceError::Format(e.to_string()))
}

impl ForceField {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut cp = Checkpoint::new();
        cp.insert("force_w1".into(), NamedArray::matrix(&self.w1));
        cp.insert("force_b1".into(), NamedArray::vector(&self.b1));
        cp.insert("force_w2".into(), NamedArray::vector(&self.w2));
        cp.insert("force_b2".into(), NamedArray::scalar(self.b2));
        cp.insert("force_scale".into(), NamedArray::scalar(self.scale));
        cp
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self, ForceError> {
        let get = |k: &str| {
            cp.get(k)
                .ok_or_else(|| ForceError::Format(format!("missing array {k}")))
        };
        let w1 = get("force_w1")?.to_matrix()?;
        let b1 = get("force_b1")?.data.clone();
        let w2 = get("force_w2")?.data.clone();
        let b2 = get("force_b2")?.data[0];
        let scale = get("force_scale")?.data[0];
        if w1.ncols() != b1.len() || b1.len() != w2.len() {
            return Err(ForceError::Format("inconsistent force shapes".into()));
        }
        Ok(Self { w1, b1, w2, b2, scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_candidate_pool, Graph, PoolParams};
    use ndarray::array;

    fn dense_pool(n: usize) -> CandidatePool {
        let g = Graph::new(n, []).unwrap();
        let params = PoolParams { random_ratio: 1.0, ..PoolParams::default() };
        build_candidate_pool(&g, &params, 0).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_force() {
        let mut f = init_force(8, 3, 1.0, 1, false).unwrap();
        f.zero_params();
        let h = array![[1.0, -2.0, 0.5], [0.3, 0.0, 4.0]];
        let pool = dense_pool(2);
        let vals = force_eval(&f, &h.view(), &pool);
        assert!(vals.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_scale_gives_zero_force() {
        let mut f = init_force(8, 2, 1.0, 2, false).unwrap();
        f.scale = 0.0;
        let h = array![[5.0, 1.0], [-3.0, 2.0]];
        let pool = dense_pool(2);
        assert!(force_eval(&f, &h.view(), &pool).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_composed_double_tanh() {
        // hidden 1: W1 = e_1, W2 = [10] -> F = tanh(10 tanh(0.5)).
        let m = 3;
        let mut w1 = Array2::zeros((2 * m, 1));
        w1[[0, 0]] = 1.0;
        let f = ForceField { w1, b1: vec![0.0], w2: vec![10.0], b2: 0.0, scale: 1.0 };
        let h = array![[0.5, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let pool = dense_pool(2);
        let slot = pool.slot_of((0, 1)).unwrap();
        let vals = force_eval(&f, &h.view(), &pool);
        let oracle = (10.0 * 0.5f64.tanh()).tanh();
        assert!((vals[slot] - oracle).abs() < 1e-15);
        assert!((vals[slot] - 0.99982).abs() <= 1e-4);
    }

    #[test]
    fn boundedness_under_extreme_inputs() {
        let f = init_force(16, 4, 1.5, 3, false).unwrap();
        let mut rng = crate::rng::DetRng::new(77);
        let pool = dense_pool(2);
        for _ in 0..1000 {
            let h = Array2::from_shape_fn((2, 4), |_| rng.uniform_in(-1e6, 1e6));
            for v in force_eval(&f, &h.view(), &pool) {
                assert!(v.abs() <= f.scale, "|F| = {} > s", v.abs());
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradients() {
        let f = init_force(6, 2, 1.0, 4, false).unwrap();
        let h = array![[0.2, -0.4], [1.0, 0.7], [0.0, 0.1]];
        let pool = dense_pool(3);
        let grads = force_backward(&f, &h.view(), &pool, &vec![0.0; pool.len()]);
        assert!(grads.flatten_params().iter().all(|&v| v == 0.0));
        assert!(grads.dh.iter().all(|&v| v == 0.0));
    }

    fn fd_check(f: &ForceField, h: &Array2<f64>, pool: &CandidatePool, upstream: &[f64]) {
        let loss = |force: &ForceField, hm: &Array2<f64>| -> f64 {
            force_eval(force, &hm.view(), pool)
                .iter()
                .zip(upstream)
                .map(|(a, b)| a * b)
                .sum()
        };
        let analytic = force_backward(f, &h.view(), pool, upstream);
        let step = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);

        // parameters
        let theta0 = f.flatten_params();
        let grad_p = analytic.flatten_params();
        for idx in 0..theta0.len() {
            let mut fp = f.clone();
            let mut fm = f.clone();
            let mut tp = theta0.clone();
            let mut tm = theta0.clone();
            tp[idx] += step;
            tm[idx] -= step;
            fp.set_params_from_flat(&tp);
            fm.set_params_from_flat(&tm);
            let fd = (loss(&fp, h) - loss(&fm, h)) / (2.0 * step);
            assert!(
                rel(grad_p[idx], fd) <= 1e-4,
                "param {idx}: analytic {} vs fd {fd}",
                grad_p[idx]
            );
        }
        // features
        for i in 0..h.nrows() {
            for c in 0..h.ncols() {
                let mut hp = h.clone();
                let mut hm = h.clone();
                hp[[i, c]] += step;
                hm[[i, c]] -= step;
                let fd = (loss(f, &hp) - loss(f, &hm)) / (2.0 * step);
                assert!(
                    rel(analytic.dh[[i, c]], fd) <= 1e-4,
                    "dh[{i},{c}]: analytic {} vs fd {fd}",
                    analytic.dh[[i, c]]
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::DetRng::new(2024);
        for trial in 0..50 {
            let n = 2 + rng.index(3);
            let m = 1 + rng.index(3);
            let hidden = 1 + rng.index(5);
            let f = init_force(hidden, m, 0.5 + rng.uniform(), 1000 + trial, false).unwrap();
            let h = Array2::from_shape_fn((n, m), |_| rng.uniform_in(-1.5, 1.5));
            let pool = dense_pool(n);
            let upstream: Vec<f64> = (0..pool.len()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            fd_check(&f, &h, &pool, &upstream);
        }
    }

    #[test]
    fn equal_endpoints_with_symmetric_weights_give_equal_feature_grads() {
        // With b2 the only nonzero parameter the pair halves are symmetric.
        let m = 2;
        let mut f = init_force(3, m, 1.0, 5, false).unwrap();
        f.zero_params();
        f.b2 = 0.3;
        // make W1 halves equal so [h || h] is symmetric under half swap
        let mut w1 = Array2::zeros((2 * m, 3));
        for c in 0..3 {
            for r in 0..m {
                w1[[r, c]] = 0.1 * (c as f64 + 1.0);
                w1[[m + r, c]] = 0.1 * (c as f64 + 1.0);
            }
        }
        f.w1 = w1;
        f.w2 = vec![0.5, -0.2, 0.7];
        let h = array![[0.4, -0.6], [0.4, -0.6]];
        let pool = dense_pool(2);
        let grads = force_backward(&f, &h.view(), &pool, &vec![1.0; pool.len()]);
        for c in 0..m {
            let a = grads.dh[[0, c]];
            let b = grads.dh[[1, c]];
            assert!((a - b).abs() < 1e-12, "dF/dh_i {a} vs dF/dh_j {b}");
        }
    }

    #[test]
    fn permutation_consistency() {
        let mut rng = crate::rng::DetRng::new(6);
        let n = 5;
        let m = 3;
        let f = init_force(7, m, 1.0, 9, false).unwrap();
        let h = Array2::from_shape_fn((n, m), |_| rng.uniform_in(-1.0, 1.0));
        let pool = dense_pool(n);
        let vals = force_eval(&f, &h.view(), &pool);

        let perm = [2usize, 0, 4, 1, 3];
        let mut hp = Array2::zeros((n, m));
        for i in 0..n {
            for c in 0..m {
                hp[[perm[i], c]] = h[[i, c]];
            }
        }
        let vals_p = force_eval(&f, &hp.view(), &pool);
        for (k, &(i, j)) in pool.pairs().iter().enumerate() {
            let k_p = pool.slot_of((perm[i], perm[j])).unwrap();
            assert!((vals[k] - vals_p[k_p]).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_force(32, 16, 1.0, 42, false).unwrap();
        let b = init_force(32, 16, 1.0, 42, false).unwrap();
        assert_eq!(a, b);
        let c = init_force(32, 16, 1.0, 43, false).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_scale_policy() {
        assert!(init_force(4, 2, 1.0, 0, true).is_ok(), "s = 1.0 is a paper default");
        match init_force(4, 2, 0.1, 0, true) {
            Err(ForceError::InvalidScale { scale, f_crit }) => {
                assert_eq!(scale, 0.1);
                assert!((f_crit - 0.3849002).abs() < 1e-7);
            }
            other => panic!("expected InvalidScale, got {other:?}"),
        }
        // lenient mode constructs anyway
        assert!(init_force(4, 2, 0.1, 0, false).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let f = init_force(5, 3, 1.5, 11, false).unwrap();
        let dir = std::env::temp_dir().join("hgode_force_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("force.json");
        write_checkpoint(&path, &f.to_checkpoint()).unwrap();
        let back = ForceField::from_checkpoint(&read_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(f.w1.len(), back.w1.len());
        for (a, b) in f.flatten_params().iter().zip(back.flatten_params().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(f.scale.to_bits(), back.scale.to_bits());
    }
}
