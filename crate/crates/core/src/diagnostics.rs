//! Theory-verification metrics: diameters, stationary distributions, spectral
//! gaps, consensus limits, cubic-equilibrium and bifurcation analysis,
//! quasi-static hysteresis sweeps, cluster quality, and potential readouts.

use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::dynamics::critical_force;
use crate::graph::{row_normalize, strong_connectivity, CandidatePool, RowStochasticMatrix};
use crate::solver::{integrate_dopri5, OdeState, SolverConfig};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("operator support is not strongly connected (P is reducible)")]
    NotIrreducible,
    #[error("power iteration did not converge within {max_iter} iterations (residual {residual})")]
    NoConvergence { max_iter: usize, residual: f64 },
    #[error("eigenvalue computation failed to converge")]
    EigenFailure,
    #[error("degenerate clustering: {0}")]
    DegenerateCluster(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Solver(#[from] crate::solver::SolverError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// `max_i x_i - min_i x_i` of a scalar node signal.
pub fn diameter(x: &[f64]) -> f64 {
    assert!(!x.is_empty(), "diameter of an empty vector");
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    hi - lo
}

/// Left Perron vector of an irreducible row-stochastic matrix:
/// `pi^T P = pi^T`, `sum pi = 1`, `pi > 0`.
///
/// Power iteration on the lazy transpose `(I + P^T)/2` (same fixed vector,
/// aperiodic so periodic chains converge too), stopping on the exact
/// stationarity residual `||pi^T P - pi^T||_1 <= tol`.
pub fn stationary_distribution(
    p: &RowStochasticMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, DiagnosticsError> {
    let n = p.n();
    let report = strong_connectivity(&p.support_edges(), n);
    if !report.is_strongly_connected {
        return Err(DiagnosticsError::NotIrreducible);
    }
    let pm = p.matrix();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        // next = pi^T P
        next.fill(0.0);
        for i in 0..n {
            let w = pi[i];
            if w != 0.0 {
                for j in 0..n {
                    next[j] += w * pm[[i, j]];
                }
            }
        }
        residual = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        if residual <= tol {
            let sum: f64 = pi.iter().sum();
            for v in pi.iter_mut() {
                *v /= sum;
            }
            return Ok(pi);
        }
        // lazy update keeps periodic chains from oscillating
        for j in 0..n {
            pi[j] = 0.5 * (pi[j] + next[j]);
        }
        let sum: f64 = pi.iter().sum();
        for v in pi.iter_mut() {
            *v /= sum;
        }
    }
    Err(DiagnosticsError::NoConvergence { max_iter, residual })
}

/// Rank-one consensus limit `1 (pi^T H0)` of the consensus flow.
pub fn consensus_limit(
    p: &RowStochasticMatrix,
    h0: &ArrayView2<f64>,
) -> Result<Array2<f64>, DiagnosticsError> {
    let pi = stationary_distribution(p, 1e-13, 200_000)?;
    let n = h0.nrows();
    let m = h0.ncols();
    let mut row = vec![0.0; m];
    for i in 0..n {
        for c in 0..m {
            row[c] += pi[i] * h0[[i, c]];
        }
    }
    Ok(Array2::from_shape_fn((n, m), |(_, c)| row[c]))
}

/// Complex eigenvalues of a dense square matrix via real Schur reduction.
pub fn complex_eigenvalues(
    a: &ArrayView2<f64>,
) -> Result<Vec<nalgebra::Complex<f64>>, DiagnosticsError> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let schur = nalgebra::linalg::Schur::try_new(m, 1e-13, 100_000)
        .ok_or(DiagnosticsError::EigenFailure)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Spectral gap `min_{k >= 2} Re(1 - lambda_k(P))`, excluding one Perron root.
pub fn spectral_gap(p: &RowStochasticMatrix) -> Result<f64, DiagnosticsError> {
    let eigs = complex_eigenvalues(&p.matrix().view())?;
    // Perron root is the eigenvalue closest to 1 + 0i.
    let perron = eigs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let da = (*a - nalgebra::Complex::new(1.0, 0.0)).norm();
            let db = (*b - nalgebra::Complex::new(1.0, 0.0)).norm();
            da.partial_cmp(&db).unwrap()
        })
        .map(|(i, _)| i)
        .expect("nonempty spectrum");
    let gap = eigs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != perron)
        .map(|(_, l)| 1.0 - l.re)
        .fold(f64::INFINITY, f64::min);
    Ok(if gap.is_finite() { gap } else { 1.0 })
}

/// Count of eigenvalues of `I - row_normalize(A, eps)` with modulus <= tol.
///
/// For exactly block-diagonal `A` this equals the number of strongly
/// connected closed classes.
pub fn near_zero_laplacian_count(
    a: &ArrayView2<f64>,
    tol: f64,
) -> Result<usize, DiagnosticsError> {
    let p = row_normalize(&a.to_owned(), crate::graph::DEFAULT_EPSILON)
        .map_err(|e| DiagnosticsError::Precondition(e.to_string()))?;
    let n = p.n();
    let lap = Array2::from_shape_fn((n, n), |(i, j)| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - p.matrix()[[i, j]]
    });
    let eigs = complex_eigenvalues(&lap.view())?;
    Ok(eigs.iter().filter(|l| l.norm() <= tol).count())
}

/// Stability flag of a cubic equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Unstable,
}

/// Regime of the forced double well.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Bistable,
    Monostable,
    Critical,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Bistable => "bistable",
            Regime::Monostable => "monostable",
            Regime::Critical => "critical",
        }
    }
}

/// Real equilibria of the forced double well, ascending, with stability.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSet {
    pub roots: Vec<f64>,
    pub stability: Vec<Stability>,
    pub regime: Regime,
}

/// Real roots of `u^3 - (1 - lambda) u - F = 0` in closed form, with
/// stability from the flow linearization `(1 - lambda) - 3u^2` and the regime
/// from `|F|` against `F_crit(lambda) = 2((1 - lambda)/3)^(3/2)`.
pub fn cubic_equilibria(f: f64, lambda: f64) -> EquilibriumSet {
    assert!((0.0..1.0).contains(&lambda), "lambda in [0, 1)");
    let a = 1.0 - lambda; // depressed cubic: u^3 + p u + q with p = -a, q = -F
    let f_crit = critical_force(lambda);
    let regime = if (f.abs() - f_crit).abs() <= 1e-12 {
        Regime::Critical
    } else if f.abs() < f_crit {
        Regime::Bistable
    } else {
        Regime::Monostable
    };

    let roots = match regime {
        Regime::Monostable => {
            let p = -a;
            let q = -f;
            let disc = (q * q / 4.0) + (p * p * p / 27.0);
            let sqrt_disc = disc.max(0.0).sqrt();
            let u = cbrt(-q / 2.0 + sqrt_disc) + cbrt(-q / 2.0 - sqrt_disc);
            vec![polish_root(u, a, f)]
        }
        _ => {
            // Three real roots via the trigonometric method.
            let r = 2.0 * (a / 3.0).sqrt();
            let arg = (3.0 * f / (a * r)).clamp(-1.0, 1.0);
            let phi = arg.acos();
            let mut rs: Vec<f64> = (0..3)
                .map(|k| r * ((phi - 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos())
                .map(|u| polish_root(u, a, f))
                .collect();
            rs.sort_by(|x, y| x.partial_cmp(y).unwrap());
            rs
        }
    };

    let stability = roots
        .iter()
        .map(|&u| {
            if a - 3.0 * u * u < 0.0 {
                Stability::Stable
            } else {
                Stability::Unstable
            }
        })
        .collect();

    EquilibriumSet { roots, stability, regime }
}

fn cbrt(x: f64) -> f64 {
    x.signum() * x.abs().powf(1.0 / 3.0)
}

fn polish_root(u: f64, a: f64, f: f64) -> f64 {
    let mut u = u;
    for _ in 0..2 {
        let g = u * u * u - a * u - f;
        let dg = 3.0 * u * u - a;
        if dg.abs() > 1e-12 {
            u -= g / dg;
        }
    }
    u
}

/// Quasi-static sweep record: force schedule, settled edge states, and
/// detected switch points.
#[derive(Debug, Clone)]
pub struct HysteresisTrace {
    pub f_schedule: Vec<f64>,
    pub u_path: Vec<f64>,
    /// Force at which the settled state switched from - to + (ascending leg).
    pub up_switch_f: Option<f64>,
    /// Force at which the settled state switched from + to - (descending leg).
    pub down_switch_f: Option<f64>,
}

impl HysteresisTrace {
    pub fn loop_width(&self) -> Option<f64> {
        match (self.up_switch_f, self.down_switch_f) {
            (Some(up), Some(down)) => Some(up - down),
            _ => None,
        }
    }

    /// CSV `F,u` rows of the sweep path.
    pub fn write_csv(&self, path: &Path) -> Result<(), DiagnosticsError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "F,u")?;
        for (f, u) in self.f_schedule.iter().zip(&self.u_path) {
            writeln!(w, "{f},{u}")?;
        }
        Ok(())
    }
}

/// Build the triangle sweep schedule `f_start -> f_end -> -f_end -> f_end`
/// with `n_points` per leg (shared endpoints deduplicated).
pub fn sweep_schedule(f_start: f64, f_end: f64, n_points: usize) -> Vec<f64> {
    assert!(n_points >= 2, "need at least two points per leg");
    let waypoints = [f_start, f_end, -f_end, f_end];
    let mut schedule = Vec::new();
    for leg in waypoints.windows(2) {
        let (lo, hi) = (leg[0], leg[1]);
        let start_k = if schedule.is_empty() { 0 } else { 1 };
        for k in start_k..n_points {
            let frac = k as f64 / (n_points - 1) as f64;
            schedule.push(lo + (hi - lo) * frac);
        }
    }
    schedule
}

/// Quasi-static hysteresis sweep of `du/dt = (1 - lambda) u - u^3 + F`.
///
/// At each scheduled force the state relaxes from the previous endpoint for
/// `dwell_time`; switch forces are the midpoints of the bracketing pair where
/// the settled state changes sign.
pub fn hysteresis_sweep(
    lambda: f64,
    f_schedule: &[f64],
    dwell_time: f64,
    u0: f64,
) -> Result<HysteresisTrace, DiagnosticsError> {
    assert!(!f_schedule.is_empty());
    let cfg = SolverConfig::with_tol(1e-9);
    let mut u = u0;
    let mut u_path = Vec::with_capacity(f_schedule.len());
    for &f in f_schedule {
        let mut field = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = (1.0 - lambda) * y[0] - y[0] * y[0] * y[0] + f;
        };
        let traj =
            integrate_dopri5(&mut field, &OdeState::flat(vec![u]), 0.0, dwell_time, &cfg, &[])?;
        u = traj.last_state()[0];
        u_path.push(u);
    }

    let mut up_switch_f = None;
    let mut down_switch_f = None;
    for k in 1..u_path.len() {
        let (u_prev, u_next) = (u_path[k - 1], u_path[k]);
        let (f_prev, f_next) = (f_schedule[k - 1], f_schedule[k]);
        let mid = 0.5 * (f_prev + f_next);
        if u_prev < 0.0 && u_next >= 0.0 && f_next > f_prev && up_switch_f.is_none() {
            up_switch_f = Some(mid);
        }
        if u_prev > 0.0 && u_next <= 0.0 && f_next < f_prev && down_switch_f.is_none() {
            down_switch_f = Some(mid);
        }
    }

    Ok(HysteresisTrace {
        f_schedule: f_schedule.to_vec(),
        u_path,
        up_switch_f,
        down_switch_f,
    })
}

/// Silhouette and mean pairwise distances for a labeled point set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMetrics {
    /// Mean silhouette in `[-1, 1]`.
    pub silhouette: f64,
    pub mean_intra_dist: f64,
    pub mean_inter_dist: f64,
    /// Set when a singleton cluster or an all-zero pair forced the `s_i = 0`
    /// convention somewhere.
    pub degenerate: bool,
}

/// Standard silhouette with Euclidean distances.
///
/// `a_i` is the mean distance to the own cluster (excluding self), `b_i` the
/// minimum over other clusters of the mean distance; `s_i = (b_i - a_i) /
/// max(a_i, b_i)` with the `0/0 -> 0` convention for degenerate cases.
pub fn cluster_metrics(
    h: &ArrayView2<f64>,
    labels: &[usize],
) -> Result<ClusterMetrics, DiagnosticsError> {
    let n = h.nrows();
    assert_eq!(labels.len(), n, "one label per row");
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(DiagnosticsError::Precondition("need at least 2 clusters".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(DiagnosticsError::Precondition("every cluster must be nonempty".into()));
    }

    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..h.ncols() {
            let d = h[[i, c]] - h[[j, c]];
            s += d * d;
        }
        s.sqrt()
    };

    let mut degenerate = counts.iter().any(|&c| c == 1);
    let mut sil_sum = 0.0;
    let mut intra_sum = 0.0;
    let mut intra_cnt = 0usize;
    let mut inter_sum = 0.0;
    let mut inter_cnt = 0usize;

    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist(i, j);
            sums[labels[j]] += d;
            if j > i {
                if labels[i] == labels[j] {
                    intra_sum += d;
                    intra_cnt += 1;
                } else {
                    inter_sum += d;
                    inter_cnt += 1;
                }
            }
        }
        let own = labels[i];
        let s_i = if counts[own] <= 1 {
            0.0
        } else {
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                degenerate = true;
                0.0
            } else {
                (b - a) / denom
            }
        };
        debug_assert!((-1.0..=1.0).contains(&s_i));
        sil_sum += s_i;
    }

    Ok(ClusterMetrics {
        silhouette: sil_sum / n as f64,
        mean_intra_dist: if intra_cnt > 0 { intra_sum / intra_cnt as f64 } else { 0.0 },
        mean_inter_dist: if inter_cnt > 0 { inter_sum / inter_cnt as f64 } else { 0.0 },
        degenerate,
    })
}

/// Mean potential over same-label and different-label pool pairs.
///
/// An empty group is reported as absent.
pub fn potential_polarization(
    u: &[f64],
    pool: &CandidatePool,
    labels: &[usize],
) -> (Option<f64>, Option<f64>) {
    assert_eq!(u.len(), pool.len());
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for (k, &(i, j)) in pool.pairs().iter().enumerate() {
        if labels[i] == labels[j] {
            intra.0 += u[k];
            intra.1 += 1;
        } else {
            inter.0 += u[k];
            inter.1 += 1;
        }
    }
    let avg = |(s, c): (f64, usize)| if c > 0 { Some(s / c as f64) } else { None };
    (avg(intra), avg(inter))
}

/// Verify global polarization above the fold: every start in the grid must
/// converge to the single equilibrium whose sign matches the force.
pub fn margin_polarization_check(
    f_const: f64,
    u0_grid: &[f64],
    t_end: f64,
) -> Result<bool, DiagnosticsError> {
    let f_crit = critical_force(0.0);
    if f_const.abs() <= f_crit {
        return Err(DiagnosticsError::Precondition(format!(
            "|F| = {} must exceed F_crit = {f_crit}",
            f_const.abs()
        )));
    }
    let eq = cubic_equilibria(f_const, 0.0);
    let u_star = eq.roots[0];
    debug_assert_eq!(eq.roots.len(), 1);
    let cfg = SolverConfig::with_tol(1e-10);
    for &u0 in u0_grid {
        let mut field = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[0] - y[0] * y[0] * y[0] + f_const;
        };
        let traj = integrate_dopri5(&mut field, &OdeState::flat(vec![u0]), 0.0, t_end, &cfg, &[])?;
        let u_final = traj.last_state()[0];
        if (u_final - u_star).abs() > 1e-4 || u_final.signum() != f_const.signum() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Matrix exponential by scaling-and-squaring with a Taylor series.
///
/// Reference oracle for the integrators: shares no code path with the
/// Runge-Kutta machinery.
pub fn expm(a: &ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let squarings = norm.log2().ceil().max(0.0) as u32 + 1;
    let scaled = a.to_owned() / 2f64.powi(squarings as i32);
    let mut result = Array2::<f64>::eye(n);
    let mut term = Array2::<f64>::eye(n);
    for k in 1..40 {
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

/// Least-squares slope of `ln(values)` against `times`, returned as the decay
/// rate (positive for decaying signals). Non-positive values are skipped.
pub fn fit_decay_rate(times: &[f64], values: &[f64]) -> f64 {
    assert_eq!(times.len(), values.len());
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > 0.0)
        .map(|(&t, &v)| (t, v.ln()))
        .collect();
    assert!(pts.len() >= 2, "need at least two positive samples to fit");
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, y) in pts {
        num += (t - mean_t) * (y - mean_y);
        den += (t - mean_t) * (t - mean_t);
    }
    -(num / den)
}

/// One row of the metric time series CSV.
#[derive(Debug, Clone)]
pub struct MetricSample {
    pub t: f64,
    pub silhouette: f64,
    pub intra_dist: f64,
    pub inter_dist: f64,
    pub mean_intra_u: Option<f64>,
    pub mean_inter_u: Option<f64>,
}

/// `t,silhouette,intra_dist,inter_dist,mean_intra_U,mean_inter_U` rows
/// (U columns empty when absent).
pub fn write_metric_series(path: &Path, rows: &[MetricSample]) -> Result<(), DiagnosticsError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,silhouette,intra_dist,inter_dist,mean_intra_U,mean_inter_U")?;
    for r in rows {
        let ui = r.mean_intra_u.map_or(String::new(), |v| v.to_string());
        let ue = r.mean_inter_u.map_or(String::new(), |v| v.to_string());
        writeln!(w, "{},{},{},{},{},{}", r.t, r.silhouette, r.intra_dist, r.inter_dist, ui, ue)?;
    }
    Ok(())
}

/// Bifurcation scan CSV: `F,n_roots,root1,root2,root3,regime`.
pub fn write_bifurcation_csv(
    path: &Path,
    scan: &[(f64, EquilibriumSet)],
) -> Result<(), DiagnosticsError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "F,n_roots,root1,root2,root3,regime")?;
    for (f, eq) in scan {
        let mut cols = [String::new(), String::new(), String::new()];
        for (i, r) in eq.roots.iter().enumerate() {
            cols[i] = r.to_string();
        }
        writeln!(
            w,
            "{},{},{},{},{},{}",
            f,
            eq.roots.len(),
            cols[0],
            cols[1],
            cols[2],
            eq.regime.name()
        )?;
    }
    Ok(())
}
