//! Initial-value-problem integrators.
//!
//! [`integrate_dopri5`] is an adaptive Dormand-Prince 5(4) with the embedded
//! error estimate, a PI step-size controller (safety 0.9, factor clamp
//! [0.2, 5]) and the standard quartic dense-output interpolant.
//! [`integrate_fixed`] provides plain Euler and classic RK4 on a uniform grid
//! for differentiable training unrolls.
//!
//! Integrators hold no global state; the field must be a pure function of
//! `(t, y)` (the `&mut self` receiver only allows internal scratch reuse).

use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("exceeded max_steps = {max_steps} at t = {t}")]
    MaxStepsExceeded { max_steps: usize, t: f64 },
    #[error("step size underflow at t = {t}: h = {h} < h_min with err > 1 (region too sharp for the tolerance)")]
    StepUnderflow { t: f64, h: f64 },
    #[error("invalid solver input: {0}")]
    BadInput(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Right-hand side of an ODE. Implemented for closures `FnMut(t, y, dydt)`.
pub trait OdeField {
    fn eval(&mut self, t: f64, y: &[f64], dydt: &mut [f64]);
}

impl<F: FnMut(f64, &[f64], &mut [f64])> OdeField for F {
    fn eval(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) {
        self(t, y, dydt)
    }
}

/// Named segment of a flat state vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Layout of logical blocks inside a flat state vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateLayout {
    segments: Vec<Segment>,
    dim: usize,
}

impl StateLayout {
    /// Build from `(name, len)` blocks laid out contiguously.
    pub fn new(blocks: &[(&str, usize)]) -> Self {
        let mut segments = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for &(name, len) in blocks {
            segments.push(Segment { name: name.to_string(), offset, len });
            offset += len;
        }
        Self { segments, dim: offset }
    }

    /// Single anonymous block.
    pub fn flat(dim: usize) -> Self {
        Self::new(&[("y", dim)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn range_of(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.offset..s.offset + s.len)
    }
}

/// Flat state vector with a named segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeState {
    pub y: Vec<f64>,
    pub layout: StateLayout,
}

impl OdeState {
    pub fn new(y: Vec<f64>, layout: StateLayout) -> Self {
        assert_eq!(y.len(), layout.dim(), "state length must match layout");
        Self { y, layout }
    }

    pub fn flat(y: Vec<f64>) -> Self {
        let layout = StateLayout::flat(y.len());
        Self { y, layout }
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        let r = self.layout.range_of(name).expect("unknown segment");
        &self.y[r]
    }
}

/// Adaptive solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-5,
            h_init: 1e-2,
            h_min: 1e-10,
            // DP5's real-axis stability boundary sits near z = -3.3; the
            // stiffest field directions here have rates O(2), so steps much
            // beyond 1 let dead modes bounce along the tolerance band.
            h_max: 1.0,
            max_steps: 1_000_000,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self { rtol: tol, atol: tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(SolverError::BadInput("rtol and atol must be positive".into()));
        }
        if !(self.h_min <= self.h_init && self.h_init <= self.h_max) {
            return Err(SolverError::BadInput("need h_min <= h_init <= h_max".into()));
        }
        Ok(())
    }
}

/// Saved integration output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Strictly increasing save times.
    pub times: Vec<f64>,
    /// One flat state per save time.
    pub states: Vec<Vec<f64>>,
    pub layout: StateLayout,
    pub n_accepted: usize,
    pub n_rejected: usize,
    /// Field evaluations performed.
    pub n_evals: usize,
}

impl Trajectory {
    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    /// CSV with header `t,<segment>_<index>,...`, one row per save point.
    pub fn write_csv(&self, path: &Path) -> Result<(), SolverError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let mut header = String::from("t");
        for seg in self.layout.segments() {
            for k in 0..seg.len {
                header.push(',');
                header.push_str(&format!("{}_{}", seg.name, k));
            }
        }
        writeln!(w, "{header}")?;
        for (t, y) in self.times.iter().zip(&self.states) {
            write!(w, "{t}")?;
            for v in y {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// 5th-order weights equal A's last row (FSAL); embedded error coefficients:
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Dense-output coefficients for the quartic interpolant.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const SAFETY: f64 = 0.9;
const FACTOR_MIN: f64 = 0.2;
const FACTOR_MAX: f64 = 5.0;
// PI controller exponents (order 5).
const PI_BETA: f64 = 0.04;
const PI_EXPO: f64 = 0.2 - PI_BETA * 0.75;

struct Dopri5Workspace {
    k: [Vec<f64>; 7],
    y_stage: Vec<f64>,
    y_new: Vec<f64>,
    cont: [Vec<f64>; 5],
}

impl Dopri5Workspace {
    fn new(dim: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            y_stage: vec![0.0; dim],
            y_new: vec![0.0; dim],
            cont: std::array::from_fn(|_| vec![0.0; dim]),
        }
    }

    /// Quartic dense-output evaluation at fraction `s` of the step.
    fn interpolate(&self, s: f64, out: &mut [f64]) {
        let s1 = 1.0 - s;
        for i in 0..out.len() {
            out[i] = self.cont[0][i]
                + s * (self.cont[1][i]
                    + s1 * (self.cont[2][i] + s * (self.cont[3][i] + s1 * self.cont[4][i])));
        }
    }
}

/// Low-level adaptive driver. Calls `on_accept(t, y)` after every accepted
/// step and fills `saved` with dense-output states at `save_at`.
pub fn dopri5_observed<F: OdeField>(
    field: &mut F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    config: &SolverConfig,
    save_at: &[f64],
    mut on_accept: impl FnMut(f64, &[f64]),
) -> Result<(Vec<Vec<f64>>, Vec<f64>, usize, usize, usize), SolverError> {
    config.validate()?;
    if t1 <= t0 {
        return Err(SolverError::BadInput(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    for w in save_at.windows(2) {
        if w[1] <= w[0] {
            return Err(SolverError::BadInput("save_at must be strictly ascending".into()));
        }
    }
    if let (Some(&first), Some(&last)) = (save_at.first(), save_at.last()) {
        if first < t0 - 1e-12 || last > t1 + 1e-12 {
            return Err(SolverError::BadInput("save_at must lie within [t0, t1]".into()));
        }
    }

    let dim = y0.len();
    let mut ws = Dopri5Workspace::new(dim);
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut h = config.h_init.clamp(config.h_min, config.h_max.min(t1 - t0));
    let mut n_accepted = 0usize;
    let mut n_rejected = 0usize;
    let mut n_evals = 0usize;
    let mut err_old: f64 = 1e-4;

    let mut saved: Vec<Vec<f64>> = Vec::with_capacity(save_at.len());
    let mut next_save = 0usize;
    while next_save < save_at.len() && save_at[next_save] <= t0 {
        saved.push(y.clone());
        next_save += 1;
    }

    field.eval(t, &y, &mut ws.k[0]);
    n_evals += 1;

    let mut attempts = 0usize;
    while t < t1 {
        attempts += 1;
        if attempts > config.max_steps {
            return Err(SolverError::MaxStepsExceeded { max_steps: config.max_steps, t });
        }
        let h_step = h.min(t1 - t);

        // Stages 2..7 (k[0] carried over via FSAL).
        for stage in 1..7 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (l, k_l) in ws.k.iter().enumerate().take(stage) {
                    let a = A[stage][l];
                    if a != 0.0 {
                        acc += a * k_l[i];
                    }
                }
                ws.y_stage[i] = y[i] + h_step * acc;
            }
            if stage == 6 {
                ws.y_new.copy_from_slice(&ws.y_stage);
            }
            field.eval(t + C[stage] * h_step, &ws.y_stage, &mut ws.k[stage]);
            n_evals += 1;
        }

        // Embedded error in the mixed tolerance norm.
        let mut err_sq = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for (l, k_l) in ws.k.iter().enumerate() {
                if E[l] != 0.0 {
                    e += E[l] * k_l[i];
                }
            }
            e *= h_step;
            let scale = config.atol + config.rtol * y[i].abs().max(ws.y_new[i].abs());
            err_sq += (e / scale) * (e / scale);
        }
        let err = (err_sq / dim as f64).sqrt();

        if err <= 1.0 {
            // Dense-output coefficients for the accepted span.
            for i in 0..dim {
                let ydiff = ws.y_new[i] - y[i];
                let bspl = h_step * ws.k[0][i] - ydiff;
                ws.cont[0][i] = y[i];
                ws.cont[1][i] = ydiff;
                ws.cont[2][i] = bspl;
                ws.cont[3][i] = ydiff - h_step * ws.k[6][i] - bspl;
                let mut dsum = 0.0;
                for (l, k_l) in ws.k.iter().enumerate() {
                    if D[l] != 0.0 {
                        dsum += D[l] * k_l[i];
                    }
                }
                ws.cont[4][i] = h_step * dsum;
            }
            let t_new = t + h_step;
            while next_save < save_at.len() && save_at[next_save] <= t_new + 1e-14 {
                let ts = save_at[next_save];
                let s = ((ts - t) / h_step).clamp(0.0, 1.0);
                let mut out = vec![0.0; dim];
                if s >= 1.0 {
                    out.copy_from_slice(&ws.y_new);
                } else {
                    ws.interpolate(s, &mut out);
                }
                saved.push(out);
                next_save += 1;
            }

            ws.k.swap(0, 6); // FSAL
            y.copy_from_slice(&ws.y_new);
            t = t_new;
            n_accepted += 1;
            on_accept(t, &y);

            let fac11 = err.max(1e-16).powf(PI_EXPO);
            let fac = (fac11 / err_old.powf(PI_BETA) / SAFETY)
                .clamp(1.0 / FACTOR_MAX, 1.0 / FACTOR_MIN);
            h = (h_step / fac).clamp(config.h_min, config.h_max);
            err_old = err.max(1e-4);
        } else {
            n_rejected += 1;
            if h_step <= config.h_min * (1.0 + 1e-12) {
                return Err(SolverError::StepUnderflow { t, h: h_step });
            }
            let fac11 = err.powf(PI_EXPO);
            h = (h_step / (fac11 / SAFETY).min(1.0 / FACTOR_MIN)).max(config.h_min);
        }
    }

    // Save points that coincide with t1 up to roundoff.
    while next_save < save_at.len() {
        saved.push(y.clone());
        next_save += 1;
    }

    Ok((saved, y, n_accepted, n_rejected, n_evals))
}

/// Integrate with adaptive Dormand-Prince 5(4), returning states at `save_at`
/// (or only the final state when `save_at` is empty).
pub fn integrate_dopri5<F: OdeField>(
    field: &mut F,
    y0: &OdeState,
    t0: f64,
    t1: f64,
    config: &SolverConfig,
    save_at: &[f64],
) -> Result<Trajectory, SolverError> {
    let (saved, y_final, n_accepted, n_rejected, n_evals) =
        dopri5_observed(field, &y0.y, t0, t1, config, save_at, |_, _| {})?;
    let (times, states) = if save_at.is_empty() {
        (vec![t1], vec![y_final])
    } else {
        (save_at.to_vec(), saved)
    };
    Ok(Trajectory {
        times,
        states,
        layout: y0.layout.clone(),
        n_accepted,
        n_rejected,
        n_evals,
    })
}

/// Fixed-step method for training unrolls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedMethod {
    Euler,
    Rk4,
}

impl FixedMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euler" => Some(FixedMethod::Euler),
            "rk4" => Some(FixedMethod::Rk4),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FixedMethod::Euler => "euler",
            FixedMethod::Rk4 => "rk4",
        }
    }
}

/// One fixed step in place. Exposed for the training unroll.
pub fn fixed_step<F: OdeField>(
    field: &mut F,
    t: f64,
    h: f64,
    y: &mut [f64],
    method: FixedMethod,
    scratch: &mut FixedScratch,
) {
    let dim = y.len();
    match method {
        FixedMethod::Euler => {
            field.eval(t, y, &mut scratch.k1);
            for i in 0..dim {
                y[i] += h * scratch.k1[i];
            }
        }
        FixedMethod::Rk4 => {
            field.eval(t, y, &mut scratch.k1);
            for i in 0..dim {
                scratch.tmp[i] = y[i] + 0.5 * h * scratch.k1[i];
            }
            field.eval(t + 0.5 * h, &scratch.tmp, &mut scratch.k2);
            for i in 0..dim {
                scratch.tmp[i] = y[i] + 0.5 * h * scratch.k2[i];
            }
            field.eval(t + 0.5 * h, &scratch.tmp, &mut scratch.k3);
            for i in 0..dim {
                scratch.tmp[i] = y[i] + h * scratch.k3[i];
            }
            field.eval(t + h, &scratch.tmp, &mut scratch.k4);
            for i in 0..dim {
                y[i] += h / 6.0
                    * (scratch.k1[i] + 2.0 * scratch.k2[i] + 2.0 * scratch.k3[i] + scratch.k4[i]);
            }
        }
    }
}

/// Reusable stage buffers for [`fixed_step`].
pub struct FixedScratch {
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    pub k3: Vec<f64>,
    pub k4: Vec<f64>,
    pub tmp: Vec<f64>,
}

impl FixedScratch {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// Fixed-step integration over a uniform grid of `n_steps` steps.
///
/// The returned trajectory holds all `n_steps + 1` grid points; the
/// evaluation count is `n_steps` for Euler and `4 * n_steps` for RK4.
pub fn integrate_fixed<F: OdeField>(
    field: &mut F,
    y0: &OdeState,
    t0: f64,
    t1: f64,
    n_steps: usize,
    method: FixedMethod,
) -> Trajectory {
    assert!(n_steps >= 1, "need at least one step");
    let dim = y0.y.len();
    let h = (t1 - t0) / n_steps as f64;
    let mut scratch = FixedScratch::new(dim);
    let mut y = y0.y.clone();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(t0);
    states.push(y.clone());
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        fixed_step(field, t, h, &mut y, method, &mut scratch);
        times.push(t0 + (step + 1) as f64 * h);
        states.push(y.clone());
    }
    let n_evals = match method {
        FixedMethod::Euler => n_steps,
        FixedMethod::Rk4 => 4 * n_steps,
    };
    Trajectory {
        times,
        states,
        layout: y0.layout.clone(),
        n_accepted: n_steps,
        n_rejected: 0,
        n_evals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, y: &[f64], dy: &mut [f64]) {
        for i in 0..y.len() {
            dy[i] = -y[i];
        }
    }

    #[test]
    fn dopri5_scalar_exponential() {
        let cfg = SolverConfig::with_tol(1e-5);
        let y0 = OdeState::flat(vec![1.0]);
        let traj =
            integrate_dopri5(&mut decay, &y0, 0.0, 1.0, &cfg, &[1.0]).unwrap();
        let expect = (-1.0f64).exp();
        assert!((traj.states[0][0] - expect).abs() <= 1e-5);
    }

    #[test]
    fn dopri5_constant_field_is_constant() {
        let cfg = SolverConfig::default();
        let y0 = OdeState::flat(vec![2.5, -3.0]);
        let mut zero = |_t: f64, _y: &[f64], dy: &mut [f64]| dy.fill(0.0);
        let traj =
            integrate_dopri5(&mut zero, &y0, 0.0, 5.0, &cfg, &[0.0, 1.0, 2.5, 5.0]).unwrap();
        for state in &traj.states {
            assert_eq!(state, &vec![2.5, -3.0]);
        }
    }

    /// Independent oracle: scaling-and-squaring matrix exponential (Taylor).
    pub(crate) fn expm(a: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
        let n = a.nrows();
        let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
        let squarings = norm.log2().ceil().max(0.0) as u32 + 1;
        let scaled = a / 2f64.powi(squarings as i32);
        let mut result = ndarray::Array2::<f64>::eye(n);
        let mut term = ndarray::Array2::<f64>::eye(n);
        for k in 1..30 {
            term = term.dot(&scaled) / k as f64;
            result = result + &term;
            if term.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-18 {
                break;
            }
        }
        for _ in 0..squarings {
            result = result.dot(&result);
        }
        result
    }

    #[test]
    fn dopri5_matches_matrix_exponential_on_consensus() {
        use crate::graph::row_normalize;
        use crate::rng::DetRng;
        let mut rng = DetRng::new(31);
        let n = 5;
        let a = ndarray::Array2::from_shape_fn((n, n), |_| 0.05 + rng.uniform());
        let p = row_normalize(&a, 0.0).unwrap();
        let x0: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

        let pm = p.matrix().clone();
        let mut field = move |_t: f64, y: &[f64], dy: &mut [f64]| {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += pm[[i, j]] * y[j];
                }
                dy[i] = acc - y[i];
            }
        };
        let t1 = 2.0;
        let cfg = SolverConfig::with_tol(1e-9);
        let traj = integrate_dopri5(&mut field, &OdeState::flat(x0.clone()), 0.0, t1, &cfg, &[t1])
            .unwrap();

        let l = p.matrix() - &ndarray::Array2::<f64>::eye(n); // P - I
        let t_op = expm(&(l * t1));
        let x0v = ndarray::Array1::from(x0);
        let expect = t_op.dot(&x0v);
        let got = &traj.states[0];
        let num: f64 = got
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = expect.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den <= 1e-6, "relative error {}", num / den);
    }

    #[test]
    fn fixed_euler_one_step_hits_zero() {
        let y0 = OdeState::flat(vec![1.0]);
        let traj = integrate_fixed(&mut decay, &y0, 0.0, 1.0, 1, FixedMethod::Euler);
        assert_eq!(traj.states.last().unwrap()[0], 0.0);
        assert_eq!(traj.n_evals, 1);
    }

    #[test]
    fn fixed_rk4_exponential_accuracy() {
        let y0 = OdeState::flat(vec![1.0]);
        let traj = integrate_fixed(&mut decay, &y0, 0.0, 1.0, 100, FixedMethod::Rk4);
        let expect = (-1.0f64).exp();
        assert!((traj.last_state()[0] - expect).abs() <= 1e-8);
        assert_eq!(traj.n_evals, 400);
    }

    #[test]
    fn fixed_constant_field_exact() {
        let mut one = |_t: f64, _y: &[f64], dy: &mut [f64]| dy.fill(1.0);
        let y0 = OdeState::flat(vec![0.25]);
        for method in [FixedMethod::Euler, FixedMethod::Rk4] {
            let traj = integrate_fixed(&mut one, &y0, 1.0, 4.0, 7, method);
            assert!((traj.last_state()[0] - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn rk4_order_check_step_halving() {
        let expect = (-1.0f64).exp();
        let err = |n: usize| {
            let traj = integrate_fixed(
                &mut decay,
                &OdeState::flat(vec![1.0]),
                0.0,
                1.0,
                n,
                FixedMethod::Rk4,
            );
            (traj.last_state()[0] - expect).abs()
        };
        let ratio = err(25) / err(50);
        assert!((12.0..=20.0).contains(&ratio), "order ratio {ratio}");
    }

    #[test]
    fn dopri5_accepted_steps_within_tolerance_and_rejections_shrink() {
        // A moderately stiff oscillator to force rejections.
        let mut field = |t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -40.0 * (y[0] - (2.0 * t).sin()) + 2.0 * (2.0 * t).cos();
        };
        let cfg = SolverConfig { h_init: 0.5, ..SolverConfig::with_tol(1e-6) };
        let mut hs: Vec<f64> = Vec::new();
        let mut last_t = 0.0;
        let result = dopri5_observed(
            &mut field,
            &[0.5],
            0.0,
            3.0,
            &cfg,
            &[],
            |t, _y| {
                hs.push(t - last_t);
                last_t = t;
            },
        )
        .unwrap();
        let (_, y_final, n_acc, n_rej, n_evals) = result;
        assert!(n_rej > 0, "expected at least one rejection");
        assert_eq!(n_acc, hs.len());
        assert_eq!(n_evals, 1 + 6 * (n_acc + n_rej));
        let expect = (2.0f64 * 3.0).sin();
        assert!((y_final[0] - expect).abs() < 1e-4);
    }

    #[test]
    fn dense_output_matches_direct_integration() {
        let cfg = SolverConfig::with_tol(1e-6);
        let mut field = |t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -y[0] + (3.0 * t).cos();
            dy[1] = y[0] - 0.5 * y[1];
        };
        let y0 = OdeState::flat(vec![1.0, -0.5]);
        let save: Vec<f64> = (1..=20).map(|k| k as f64 * 0.35).collect();
        let traj = integrate_dopri5(&mut field, &y0, 0.0, 7.0, &cfg, &save).unwrap();
        for (k, &ts) in save.iter().enumerate() {
            let mut field2 = |t: f64, y: &[f64], dy: &mut [f64]| {
                dy[0] = -y[0] + (3.0 * t).cos();
                dy[1] = y[0] - 0.5 * y[1];
            };
            let direct =
                integrate_dopri5(&mut field2, &y0, 0.0, ts, &SolverConfig::with_tol(1e-10), &[ts])
                    .unwrap();
            for i in 0..2 {
                let diff = (traj.states[k][i] - direct.states[0][i]).abs();
                assert!(diff <= 10.0 * cfg.rtol, "t={ts} comp {i}: diff {diff}");
            }
        }
    }

    #[test]
    fn integration_is_bitwise_deterministic() {
        let cfg = SolverConfig::default();
        let y0 = OdeState::flat(vec![1.0, 2.0]);
        let mut f1 = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -y[1];
            dy[1] = y[0];
        };
        let mut f2 = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -y[1];
            dy[1] = y[0];
        };
        let save = [1.0, 2.0, 3.0];
        let a = integrate_dopri5(&mut f1, &y0, 0.0, 3.0, &cfg, &save).unwrap();
        let b = integrate_dopri5(&mut f2, &y0, 0.0, 3.0, &cfg, &save).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            for (va, vb) in sa.iter().zip(sb) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }

    #[test]
    fn max_steps_exceeded_errors() {
        let cfg = SolverConfig { max_steps: 5, ..SolverConfig::default() };
        let r = integrate_dopri5(&mut decay, &OdeState::flat(vec![1.0]), 0.0, 1e6, &cfg, &[]);
        assert!(matches!(r, Err(SolverError::MaxStepsExceeded { .. })));
    }

    #[test]
    fn step_underflow_on_discontinuous_field() {
        // Discontinuity the error controller cannot resolve at h_min.
        let mut field = |t: f64, _y: &[f64], dy: &mut [f64]| {
            dy[0] = if t < 0.5 { 1.0 } else { -1e9 };
        };
        let cfg = SolverConfig {
            h_min: 1e-3,
            h_init: 1e-2,
            ..SolverConfig::with_tol(1e-12)
        };
        let r = integrate_dopri5(&mut field, &OdeState::flat(vec![0.0]), 0.0, 1.0, &cfg, &[]);
        assert!(matches!(r, Err(SolverError::StepUnderflow { .. })), "{r:?}");
    }

    #[test]
    fn trajectory_csv_header_uses_segments() {
        let layout = StateLayout::new(&[("H", 2), ("U", 1)]);
        let traj = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
            layout,
            n_accepted: 1,
            n_rejected: 0,
            n_evals: 6,
        };
        let dir = std::env::temp_dir().join("hgode_solver_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.csv");
        traj.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,H_0,H_1,U_0");
        assert_eq!(lines.next().unwrap(), "0,1,2,3");
    }
}
