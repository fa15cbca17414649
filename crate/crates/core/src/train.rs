//! Margin objective, task loss, pseudo-partition construction, and
//! discretize-then-optimize training of the force field and a linear readout
//! through a fixed-step unroll of the coupled dynamics.
//!
//! The unroll stores every stage input state; the reverse sweep applies the
//! exact field vector-Jacobian product step by step, so gradients match the
//! discretized loss to machine precision (checked against central finite
//! differences in the tests and the acceptance suite).

use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::dynamics::{critical_force, CoupledState, HgodeParams, HgodeSystem};
use crate::force::{init_force, ForceField, ForceGradients};
use crate::graph::{CandidatePool, Graph};
use crate::rng::{derive_seed, DetRng};
use crate::solver::{fixed_step, FixedMethod, FixedScratch, OdeField};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("degenerate clustering: {0}")]
    DegenerateCluster(String),
    #[error("invalid training input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Force(#[from] crate::force::ForceError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Positive and negative pool slots for the force-margin objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSets {
    /// Pool slots whose endpoints share a label.
    pub positives: Vec<usize>,
    /// Pool slots whose endpoints differ.
    pub negatives: Vec<usize>,
}

impl PairSets {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Margin above the fold threshold.
    pub delta: f64,
    /// Margin-loss weight.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub unroll_steps: usize,
    pub unroll_method: FixedMethod,
    /// Per-set cap on sampled margin pairs.
    pub pair_sample_size: usize,
    pub seed: u64,
    /// Training integration horizon.
    pub horizon: f64,
    /// Initial edge potential.
    pub u0: f64,
    /// Force hidden width.
    pub hidden: usize,
    /// Ablation switch mirrored into the unrolled system.
    pub cubic_term: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            beta: 0.1,
            lr: 1e-3,
            epochs: 60,
            unroll_steps: 20,
            unroll_method: FixedMethod::Rk4,
            pair_sample_size: 256,
            seed: 0,
            horizon: 1.0,
            u0: 0.0,
            hidden: 32,
            cubic_term: true,
        }
    }
}

fn softplus(x: f64) -> f64 {
    // stable: max(x, 0) + ln(1 + e^{-|x|})
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Summed force-margin loss and its exact gradient w.r.t. the force vector.
///
/// `softplus((F_crit + delta) - F_k)` over positives plus
/// `softplus((F_crit + delta) + F_k)` over negatives.
pub fn margin_loss(
    f: &[f64],
    pairs: &PairSets,
    delta: f64,
    f_crit: f64,
) -> (f64, Vec<f64>) {
    assert!(delta > 0.0, "delta must be positive");
    let target = f_crit + delta;
    let mut loss = 0.0;
    let mut grad = vec![0.0; f.len()];
    for &k in &pairs.positives {
        loss += softplus(target - f[k]);
        grad[k] -= logistic(target - f[k]);
    }
    for &k in &pairs.negatives {
        loss += softplus(target + f[k]);
        grad[k] += logistic(target + f[k]);
    }
    (loss, grad)
}

/// Linear readout on final-time features.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    /// `(m x K)` weights.
    pub w: Array2<f64>,
    /// Length-`K` bias.
    pub b: Vec<f64>,
}

impl Readout {
    pub fn zeros(feat_dim: usize, n_classes: usize) -> Self {
        Self { w: Array2::zeros((feat_dim, n_classes)), b: vec![0.0; n_classes] }
    }

    pub fn n_classes(&self) -> usize {
        self.b.len()
    }

    pub fn logits(&self, h: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = h.dot(&self.w);
        for mut row in z.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        z
    }

    /// Argmax class per node (ties to the lowest index).
    pub fn predict(&self, h: &ArrayView2<f64>) -> Vec<usize> {
        let z = self.logits(h);
        (0..z.nrows())
            .map(|i| {
                let row = z.row(i);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, h: &ArrayView2<f64>, labels: &[usize]) -> f64 {
        let preds = self.predict(h);
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len() as f64
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.w.iter().copied().collect();
        out.extend(self.b.iter().copied());
        out
    }

    pub fn set_params_from_flat(&mut self, flat: &[f64]) {
        let nw = self.w.len();
        assert_eq!(flat.len(), nw + self.b.len());
        for (v, s) in self.w.iter_mut().zip(&flat[..nw]) {
            *v = *s;
        }
        for (v, s) in self.b.iter_mut().zip(&flat[nw..]) {
            *v = *s;
        }
    }
}

/// Mean cross-entropy over masked nodes with a stable log-softmax.
///
/// Returns `(loss, dLoss/dH_final, dLoss/dW, dLoss/db)`.
pub fn task_loss(
    h_final: &ArrayView2<f64>,
    readout: &Readout,
    labels: &[usize],
    mask: &[usize],
) -> (f64, Array2<f64>, Array2<f64>, Vec<f64>) {
    assert!(!mask.is_empty(), "mask must be nonempty");
    let k = readout.n_classes();
    let m = h_final.ncols();
    let logits = readout.logits(h_final);
    let inv = 1.0 / mask.len() as f64;

    let mut loss = 0.0;
    let mut dh = Array2::zeros(h_final.dim());
    let mut dw = Array2::zeros((m, k));
    let mut db = vec![0.0; k];
    for &i in mask {
        let label = labels[i];
        assert!(label < k, "label {label} out of range for {k} classes");
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += (log_z - row[label]) * inv;
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            let g = (p - if c == label { 1.0 } else { 0.0 }) * inv;
            db[c] += g;
            for d in 0..m {
                dw[[d, c]] += h_final[[i, d]] * g;
                dh[[i, d]] += readout.w[[d, c]] * g;
            }
        }
    }
    (loss, dh, dw, db)
}

/// K-means with k-means++ seeding on initial features; deterministic per
/// seed, at most 50 Lloyd iterations.
pub fn pseudo_partition(
    h0: &ArrayView2<f64>,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, TrainError> {
    let n = h0.nrows();
    let m = h0.ncols();
    if k < 2 {
        return Err(TrainError::Invalid("need K >= 2".into()));
    }
    if n < k {
        return Err(TrainError::Invalid(format!("need at least K = {k} points, got {n}")));
    }
    let mut rng = DetRng::new(seed);
    let dist_sq = |a: &[f64], i: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..m {
            let d = a[c] - h0[[i, c]];
            s += d * d;
        }
        s
    };

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.index(n);
    centroids.push(h0.row(first).to_vec());
    let mut d2 = vec![0.0; n];
    while centroids.len() < k {
        let mut total = 0.0;
        for i in 0..n {
            let best = centroids
                .iter()
                .map(|c| dist_sq(c, i))
                .fold(f64::INFINITY, f64::min);
            d2[i] = best;
            total += best;
        }
        if total <= 0.0 {
            return Err(TrainError::DegenerateCluster(format!(
                "only {} distinct points for K = {k}",
                centroids.len()
            )));
        }
        let pick = rng.categorical(&d2);
        centroids.push(h0.row(pick).to_vec());
    }

    let mut labels = vec![0usize; n];
    for _iter in 0..50 {
        // assignment
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d = dist_sq(cen, i);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // update
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; m]; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for c in 0..m {
                sums[labels[i]][c] += h0[[i, c]];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed the empty cluster at the farthest point
                let mut far = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = dist_sq(&centroids[labels[i]], i);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                if far_d <= 0.0 {
                    return Err(TrainError::DegenerateCluster(format!(
                        "cluster {c} stays empty after re-seeding (K too large)"
                    )));
                }
                centroids[c] = h0.row(far).to_vec();
                labels[far] = c;
                changed = true;
            } else {
                for d in 0..m {
                    centroids[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(TrainError::DegenerateCluster("empty cluster persists".into()));
    }
    Ok(labels)
}

/// Positive/negative pool pairs from labels, each uniformly subsampled
/// without replacement down to `sample_size`. Deterministic per seed.
pub fn build_pair_sets(
    labels: &[usize],
    pool: &CandidatePool,
    sample_size: usize,
    seed: u64,
) -> PairSets {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (k, &(i, j)) in pool.pairs().iter().enumerate() {
        if labels[i] == labels[j] {
            positives.push(k);
        } else {
            negatives.push(k);
        }
    }
    let mut rng = DetRng::new(derive_seed(seed, 0x7061_6972));
    let mut subsample = |set: &mut Vec<usize>| {
        if sample_size > 0 && set.len() > sample_size {
            let picks = rng.sample_without_replacement(set.len(), sample_size);
            let mut chosen: Vec<usize> = picks.iter().map(|&p| set[p]).collect();
            chosen.sort_unstable();
            *set = chosen;
        }
    };
    subsample(&mut positives);
    subsample(&mut negatives);
    PairSets { positives, negatives }
}

/// Unroll tape: every stage input state of the fixed-step integration.
pub struct UnrollTape {
    method: FixedMethod,
    h: f64,
    t0: f64,
    stages: Vec<Vec<f64>>,
    pub y_final: Vec<f64>,
}

/// Forward fixed-step unroll that records stage inputs for the reverse sweep.
pub fn unroll_forward(
    sys: &mut HgodeSystem<'_>,
    y0: &[f64],
    t0: f64,
    horizon: f64,
    n_steps: usize,
    method: FixedMethod,
) -> UnrollTape {
    assert!(n_steps >= 1);
    let dim = y0.len();
    let h = horizon / n_steps as f64;
    let stages_per_step = match method {
        FixedMethod::Euler => 1,
        FixedMethod::Rk4 => 4,
    };
    let mut stages = Vec::with_capacity(n_steps * stages_per_step);
    let mut scratch = FixedScratch::new(dim);
    let mut y = y0.to_vec();
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        match method {
            FixedMethod::Euler => {
                stages.push(y.clone());
                fixed_step(sys, t, h, &mut y, method, &mut scratch);
            }
            FixedMethod::Rk4 => {
                // record the four stage input states y, y2, y3, y4
                let y1 = y.clone();
                sys.eval(t, &y1, &mut scratch.k1);
                let y2: Vec<f64> =
                    y1.iter().zip(&scratch.k1).map(|(a, k)| a + 0.5 * h * k).collect();
                sys.eval(t + 0.5 * h, &y2, &mut scratch.k2);
                let y3: Vec<f64> =
                    y1.iter().zip(&scratch.k2).map(|(a, k)| a + 0.5 * h * k).collect();
                sys.eval(t + 0.5 * h, &y3, &mut scratch.k3);
                let y4: Vec<f64> = y1.iter().zip(&scratch.k3).map(|(a, k)| a + h * k).collect();
                sys.eval(t + h, &y4, &mut scratch.k4);
                for i in 0..dim {
                    y[i] += h / 6.0
                        * (scratch.k1[i]
                            + 2.0 * scratch.k2[i]
                            + 2.0 * scratch.k3[i]
                            + scratch.k4[i]);
                }
                stages.push(y4);
                stages.push(y3);
                stages.push(y2);
                stages.push(y1);
            }
        }
    }
    UnrollTape { method, h, t0, stages, y_final: y }
}

/// Reverse sweep through the tape.
///
/// Takes the adjoint of the final state, accumulates force-parameter
/// gradients into `fgrads`, and returns the adjoint of the initial state.
pub fn unroll_backward(
    sys: &mut HgodeSystem<'_>,
    tape: &UnrollTape,
    terminal_adjoint: &[f64],
    fgrads: &mut ForceGradients,
) -> Vec<f64> {
    let dim = terminal_adjoint.len();
    let h = tape.h;
    let mut a_bar = terminal_adjoint.to_vec();
    match tape.method {
        FixedMethod::Euler => {
            for (step, y) in tape.stages.iter().enumerate().rev() {
                let t = tape.t0 + step as f64 * h;
                let k_bar: Vec<f64> = a_bar.iter().map(|v| v * h).collect();
                let mut w = vec![0.0; dim];
                sys.vjp(t, y, &k_bar, &mut w, fgrads);
                for i in 0..dim {
                    a_bar[i] += w[i];
                }
            }
        }
        FixedMethod::Rk4 => {
            let n_steps = tape.stages.len() / 4;
            for step in (0..n_steps).rev() {
                let t = tape.t0 + step as f64 * h;
                let y4 = &tape.stages[4 * step];
                let y3 = &tape.stages[4 * step + 1];
                let y2 = &tape.stages[4 * step + 2];
                let y1 = &tape.stages[4 * step + 3];
                let c = h / 6.0;

                let k4_bar: Vec<f64> = a_bar.iter().map(|v| c * v).collect();
                let mut w4 = vec![0.0; dim];
                sys.vjp(t + h, y4, &k4_bar, &mut w4, fgrads);

                let k3_bar: Vec<f64> = a_bar
                    .iter()
                    .zip(&w4)
                    .map(|(a, w)| 2.0 * c * a + h * w)
                    .collect();
                let mut w3 = vec![0.0; dim];
                sys.vjp(t + 0.5 * h, y3, &k3_bar, &mut w3, fgrads);

                let k2_bar: Vec<f64> = a_bar
                    .iter()
                    .zip(&w3)
                    .map(|(a, w)| 2.0 * c * a + 0.5 * h * w)
                    .collect();
                let mut w2 = vec![0.0; dim];
                sys.vjp(t + 0.5 * h, y2, &k2_bar, &mut w2, fgrads);

                let k1_bar: Vec<f64> = a_bar
                    .iter()
                    .zip(&w2)
                    .map(|(a, w)| c * a + 0.5 * h * w)
                    .collect();
                let mut w1 = vec![0.0; dim];
                sys.vjp(t, y1, &k1_bar, &mut w1, fgrads);

                for i in 0..dim {
                    a_bar[i] += w1[i] + w2[i] + w3[i] + w4[i];
                }
            }
        }
    }
    a_bar
}

/// Per-epoch loss decomposition: `total = task + beta * margin` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub task: f64,
    pub margin: f64,
    pub total: f64,
}

/// Loss history CSV: `epoch,task_loss,margin_loss,total`.
pub fn write_loss_history(path: &Path, history: &[EpochLoss]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,task_loss,margin_loss,total")?;
    for e in history {
        writeln!(w, "{},{},{},{}", e.epoch, e.task, e.margin, e.total)?;
    }
    Ok(())
}

/// Full differentiable objective on one graph instance:
/// cross-entropy on the unrolled final features plus the weighted force
/// margin evaluated at the final state.
///
/// Returns the loss parts, force-parameter gradients, and readout gradients.
pub fn loss_and_grads(
    params: &HgodeParams,
    pool: &CandidatePool,
    force: &ForceField,
    readout: &Readout,
    h0: &Array2<f64>,
    labels: &[usize],
    mask: &[usize],
    pairs: &PairSets,
    tc: &TrainConfig,
) -> (EpochLoss, ForceGradients, Array2<f64>, Vec<f64>) {
    let n = h0.nrows();
    let m = h0.ncols();
    let nm = n * m;
    let state0 = CoupledState::from_initial(h0.clone(), pool.len(), tc.u0);
    let y0 = state0.pack();

    let mut sys = HgodeSystem::new(params, pool, force, m);
    sys.cubic_term = tc.cubic_term;
    let tape = unroll_forward(&mut sys, &y0.y, 0.0, tc.horizon, tc.unroll_steps, tc.unroll_method);

    let h_final =
        ArrayView2::from_shape((n, m), &tape.y_final[..nm]).expect("contiguous final features");
    let (l_task, dh_task, dw, db) = task_loss(&h_final, readout, labels, mask);

    // The margin term pins the force on the initial features: the separation
    // condition must hold from t = 0 onward, and the un-evolved features
    // avoid a bootstrap trap where early mixing degrades the margin inputs
    // before the force has learned to insulate anything.
    let f_crit = critical_force(0.0);
    let h0_slice = &y0.y[..nm];
    let mut f_vals = vec![0.0; pool.len()];
    force.eval_into(h0_slice, m, pool, &mut f_vals);
    let (l_margin, dmargin_df) = margin_loss(&f_vals, pairs, tc.delta, f_crit);

    let mut fgrads = ForceGradients::zeros(force, n);
    let mut h0_bar_scratch = vec![0.0; nm]; // H(0) is an input; gradient unused
    let upstream_margin: Vec<f64> = dmargin_df.iter().map(|g| g * tc.beta).collect();
    force.backward_into(
        h0_slice,
        m,
        pool,
        &upstream_margin,
        &mut fgrads,
        &mut h0_bar_scratch,
    );

    let mut y_bar = vec![0.0; tape.y_final.len()];
    for (slot, g) in y_bar[..nm].iter_mut().zip(dh_task.iter()) {
        *slot += g;
    }
    unroll_backward(&mut sys, &tape, &y_bar, &mut fgrads);

    let loss = EpochLoss {
        epoch: 0,
        task: l_task,
        margin: l_margin,
        total: l_task + tc.beta * l_margin,
    };
    (loss, fgrads, dw, db)
}

/// Adaptive moment estimation over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Mutable training state shared by the single-graph trainer and the
/// multi-graph benchmark driver.
pub struct Trainer {
    pub force: ForceField,
    pub readout: Readout,
    adam_force: AdamState,
    adam_readout: AdamState,
    pub tc: TrainConfig,
}

impl Trainer {
    pub fn new(
        feat_dim: usize,
        n_classes: usize,
        force_scale: f64,
        tc: TrainConfig,
    ) -> Result<Self, TrainError> {
        let force = init_force(tc.hidden, feat_dim, force_scale, tc.seed, false)?;
        Self::with_force(force, feat_dim, n_classes, tc)
    }

    pub fn with_force(
        force: ForceField,
        feat_dim: usize,
        n_classes: usize,
        tc: TrainConfig,
    ) -> Result<Self, TrainError> {
        if force.feat_dim() != feat_dim {
            return Err(TrainError::Invalid("force feature dim mismatch".into()));
        }
        let readout = Readout::zeros(feat_dim, n_classes);
        let n_force = force.n_params();
        let n_read = readout.flatten_params().len();
        Ok(Self {
            force,
            readout,
            adam_force: AdamState::new(n_force),
            adam_readout: AdamState::new(n_read),
            tc,
        })
    }

    /// One gradient step on a single graph instance.
    pub fn step_instance(
        &mut self,
        params: &HgodeParams,
        pool: &CandidatePool,
        h0: &Array2<f64>,
        labels: &[usize],
        mask: &[usize],
        pairs: &PairSets,
    ) -> EpochLoss {
        let (loss, fgrads, dw, db) = loss_and_grads(
            params,
            pool,
            &self.force,
            &self.readout,
            h0,
            labels,
            mask,
            pairs,
            &self.tc,
        );
        let mut fparams = self.force.flatten_params();
        self.adam_force
            .step(&mut fparams, &fgrads.flatten_params(), self.tc.lr);
        self.force.set_params_from_flat(&fparams);

        let mut rparams = self.readout.flatten_params();
        let mut rgrads: Vec<f64> = dw.iter().copied().collect();
        rgrads.extend(db.iter().copied());
        self.adam_readout.step(&mut rparams, &rgrads, self.tc.lr);
        self.readout.set_params_from_flat(&rparams);
        loss
    }
}

/// Train the force field and readout on one graph with the fixed-step unroll.
///
/// Pair sets come from the given labels (the labeled-data path); per-epoch
/// losses satisfy `total = task + beta * margin` exactly.
pub fn train(
    graph: &Graph,
    features: &Array2<f64>,
    labels: &[usize],
    pool: &CandidatePool,
    params: &HgodeParams,
    tc: &TrainConfig,
) -> Result<(ForceField, Readout, Vec<EpochLoss>), TrainError> {
    if graph.n_nodes() != pool.n_nodes() || features.nrows() != graph.n_nodes() {
        return Err(TrainError::Invalid("graph / pool / feature sizes disagree".into()));
    }
    params.validate()?;
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    if n_classes < 2 {
        return Err(TrainError::Invalid("need at least two classes".into()));
    }
    let mut trainer = Trainer::new(features.ncols(), n_classes, params.force_scale, tc.clone())?;
    let mask: Vec<usize> = (0..graph.n_nodes()).collect();

    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        // fresh margin pairs every epoch, deterministically from the seed
        let pairs = build_pair_sets(
            labels,
            pool,
            tc.pair_sample_size,
            derive_seed(tc.seed, epoch as u64),
        );
        let mut loss =
            trainer.step_instance(params, pool, features, labels, &mask, &pairs);
        loss.epoch = epoch;
        if !loss.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        history.push(loss);
    }
    Ok((trainer.force, trainer.readout, history))
}
