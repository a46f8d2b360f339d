//! Shared numerical kernels: fixed-step RK4 integration for matrix ODEs,
//! symmetric/PSD utilities, PSD square roots, Cholesky solves, cubic
//! midpoint interpolation, finite-difference residual stencils, and
//! log-linear decay fitting.
//!
//! Everything here is a pure function: identical inputs give bit-identical
//! outputs, which the reproducibility contract of the CLI relies on.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Pinned tolerances and caps.
//
// These are contract values: tests and the CLI rely on them, so they are
// constants rather than knobs.
// ---------------------------------------------------------------------------

/// Symmetry tolerance for user-supplied weight matrices, relative to the
/// matrix norm (floored at 1 so zero matrices validate).
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Measured uniform-positivity floor for control weights: the minimum
/// eigenvalue of R (and of R + R_bar) over the grid must be at least this.
pub const UNIFORM_PD_MIN: f64 = 1e-8;

/// PSD checks tolerate eigenvalues down to -PSD_TOL (roundoff slack).
pub const PSD_TOL: f64 = 1e-8;

/// Stability verdicts require spectral radius < 1 - STABILITY_MARGIN, so
/// neutrally stable systems deterministically report unstable.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Periodic Lyapunov solver: boundary change per backward sweep below this
/// means converged; at most LYAP_SWEEP_CAP sweeps.
pub const LYAP_SWEEP_TOL: f64 = 1e-12;
pub const LYAP_SWEEP_CAP: usize = 200;

/// Kleinman iteration: sup-norm change of successive iterates below this
/// means converged; at most KLEINMAN_CAP iterations.
pub const KLEINMAN_TOL: f64 = 1e-10;
pub const KLEINMAN_CAP: usize = 60;

/// Horizon-extension fallback: successive restrictions must agree below
/// this; horizons capped at HORIZON_EXT_CAP periods.
pub const HORIZON_EXT_TOL: f64 = 1e-9;
pub const HORIZON_EXT_CAP: usize = 64;

/// Covariance fixed point: per-period change below this means converged;
/// at most COV_SWEEP_CAP forward sweeps.
pub const COV_SWEEP_TOL: f64 = 1e-9;
pub const COV_SWEEP_CAP: usize = 500;

/// Gap values below this floor are treated as numerically zero and excluded
/// from decay fits.
pub const GAP_FLOOR: f64 = 1e-14;

/// Gaps this far below a curve's maximum are roundoff, not signal: they are
/// differences of like-sized quantities carrying ~1e-15 relative error.
/// Decay fits drop them so a long horizon's roundoff plateau cannot flatten
/// the fitted slope.
pub const RELATIVE_GAP_FLOOR: f64 = 1e-11;

/// Default fraction of points dropped at each end of a decay-fit window.
pub const FIT_DROP_FRACTION: f64 = 0.15;

/// A decay-fit verdict passes when r-squared reaches this and lambda > 0.
pub const FIT_R2_PASS: f64 = 0.98;

// ---------------------------------------------------------------------------
// Stage addressing on the period lattice.
// ---------------------------------------------------------------------------

/// A time point addressed on the integration lattice: either a grid node
/// `t0 + j*h` or the midpoint of step j. RK4 only ever evaluates right-hand
/// sides at these two kinds of points, so time-dependent data can be stored
/// as exact node/midpoint tables instead of being interpolated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Node(i64),
    Mid(i64),
}

impl Stage {
    pub fn time(self, h: f64) -> f64 {
        match self {
            Stage::Node(j) => j as f64 * h,
            Stage::Mid(j) => (j as f64 + 0.5) * h,
        }
    }
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// A matrix-valued function of time sampled on a uniform grid:
/// `values[j]` is the value at `t0 + j*h` with `h > 0`. Backward solves are
/// stored in forward time order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    t0: f64,
    h: f64,
    values: Vec<DMatrix<f64>>,
}

impl Trajectory {
    pub fn new(t0: f64, h: f64, values: Vec<DMatrix<f64>>) -> Self {
        assert!(h > 0.0, "trajectory step must be positive");
        assert!(!values.is_empty(), "trajectory must have at least one node");
        Trajectory { t0, h, values }
    }

    /// Single-node trajectory (a horizon of zero steps). The step is kept
    /// for grid bookkeeping even though no second node exists.
    pub fn single(t0: f64, h: f64, value: DMatrix<f64>) -> Self {
        Trajectory::new(t0, h, vec![value])
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.h
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn at(&self, j: usize) -> &DMatrix<f64> {
        &self.values[j]
    }

    pub fn first(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.values.last().unwrap()
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    /// Evaluate at an arbitrary time by a 4-point Lagrange cubic through
    /// the bracketing nodes, clamped at the ends; times at a node return
    /// the stored sample exactly. Times outside the span extrapolate the
    /// end cubic (callers stay in range).
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let n = self.values.len();
        if n == 1 {
            return self.values[0].clone();
        }
        let s = (t - self.t0) / self.h;
        let r = s.round();
        if (s - r).abs() <= 1e-9 && r >= 0.0 && (r as usize) < n {
            return self.values[r as usize].clone();
        }
        if n < 4 {
            // linear fallback on very short trajectories
            let j = (s.floor() as i64).clamp(0, n as i64 - 2) as usize;
            let th = s - j as f64;
            return &self.values[j] * (1.0 - th) + &self.values[j + 1] * th;
        }
        let j = (s.floor() as i64).clamp(1, n as i64 - 3) as usize;
        let th = s - j as f64;
        let (a, b, c, d) = (
            &self.values[j - 1],
            &self.values[j],
            &self.values[j + 1],
            &self.values[j + 2],
        );
        let wa = -th * (th - 1.0) * (th - 2.0) / 6.0;
        let wb = (th + 1.0) * (th - 1.0) * (th - 2.0) / 2.0;
        let wc = -(th + 1.0) * th * (th - 2.0) / 2.0;
        let wd = (th + 1.0) * th * (th - 1.0) / 6.0;
        a * wa + b * wb + c * wc + d * wd
    }

    /// Largest Frobenius-norm difference over shared nodes.
    pub fn sup_diff(&self, other: &Trajectory) -> f64 {
        assert_eq!(self.len(), other.len(), "trajectories must share the grid");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Largest asymmetry over nodes (for symmetric-solution invariants).
    pub fn max_asymmetry(&self) -> f64 {
        self.values.iter().map(|m| asymmetry(m)).fold(0.0, f64::max)
    }

    /// Smallest eigenvalue over all nodes (values must be square).
    pub fn min_eigenvalue(&self) -> f64 {
        self.values
            .iter()
            .map(min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// RK4 kernels
// ---------------------------------------------------------------------------

pub(crate) type VecState = Vec<DMatrix<f64>>;

fn vs_saxpy(y: &VecState, a: f64, k: &VecState) -> VecState {
    y.iter().zip(k).map(|(yi, ki)| yi + ki * a).collect()
}

fn vs_rk4_combine(y: &VecState, h: f64, k1: &VecState, k2: &VecState, k3: &VecState, k4: &VecState) -> VecState {
    y.iter()
        .zip(k1)
        .zip(k2)
        .zip(k3)
        .zip(k4)
        .map(|((((yi, a), b), c), d)| yi + (a + b * 2.0 + c * 2.0 + d) * (h / 6.0))
        .collect()
}

fn vs_finite(y: &VecState) -> bool {
    y.iter().all(|m| m.iter().all(|x| x.is_finite()))
}

/// Classical RK4 over `steps` lattice steps of width `h`, starting from the
/// state at `first_node`. Stage times are passed to `rhs` as lattice
/// addresses so table-backed data is looked up exactly. `project` runs after
/// every step (symmetrization of matrix iterates). Returns the visited
/// states in visit order, `steps + 1` entries, start included.
pub(crate) fn rk4_lattice<R, P>(
    start: VecState,
    first_node: i64,
    steps: usize,
    h: f64,
    backward: bool,
    mut rhs: R,
    mut project: P,
) -> Result<Vec<VecState>>
where
    R: FnMut(Stage, &VecState) -> Result<VecState>,
    P: FnMut(&mut VecState),
{
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = start;
    let dir: i64 = if backward { -1 } else { 1 };
    let sh = if backward { -h } else { h };
    out.push(y.clone());
    for s in 0..steps {
        let j = first_node + dir * s as i64;
        // Midpoint of the step [j, j+1] is Mid(j); of [j-1, j] is Mid(j-1).
        let mid = if backward { Stage::Mid(j - 1) } else { Stage::Mid(j) };
        let end = Stage::Node(j + dir);
        let k1 = rhs(Stage::Node(j), &y)?;
        let k2 = rhs(mid, &vs_saxpy(&y, sh / 2.0, &k1))?;
        let k3 = rhs(mid, &vs_saxpy(&y, sh / 2.0, &k2))?;
        let k4 = rhs(end, &vs_saxpy(&y, sh, &k3))?;
        let mut next = vs_rk4_combine(&y, sh, &k1, &k2, &k3, &k4);
        project(&mut next);
        if !vs_finite(&next) {
            return Err(Error::Divergence {
                step: s + 1,
                context: "lattice RK4 produced a non-finite value".into(),
            });
        }
        out.push(next.clone());
        y = next;
    }
    Ok(out)
}

/// Classical fixed-step RK4 for a single matrix ODE with a continuous-time
/// right-hand side. `t1 < t0` integrates backward; the returned trajectory
/// is always in forward time order (positive step) and covers the span
/// inclusively.
pub fn integrate_ode<F>(
    rhs: F,
    initial: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<Trajectory>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    if steps == 0 {
        return Err(Error::Input("integrate_ode requires steps >= 1".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut values = Vec::with_capacity(steps + 1);
    let mut y = initial.clone();
    values.push(y.clone());
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        let k1 = rhs(t, &y);
        let k2 = rhs(t + h / 2.0, &(&y + &k1 * (h / 2.0)));
        let k3 = rhs(t + h / 2.0, &(&y + &k2 * (h / 2.0)));
        let k4 = rhs(t + h, &(&y + &k3 * h));
        y = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step: s + 1,
                context: "RK4 produced a non-finite value".into(),
            });
        }
        values.push(y.clone());
    }
    if t1 < t0 {
        values.reverse();
        Ok(Trajectory::new(t1, -h, values))
    } else {
        Ok(Trajectory::new(t0, h, values))
    }
}

// ---------------------------------------------------------------------------
// Symmetric / PSD utilities
// ---------------------------------------------------------------------------

/// Symmetric part (M + M^T)/2.
pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Frobenius norm of the skew part, |M - M^T|.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm()
}

/// Smallest eigenvalue of a symmetric matrix (the symmetric part is taken
/// first, so roundoff-asymmetric inputs are fine).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(m.nrows(), m.ncols());
    let eig = sym(m).symmetric_eigen();
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = sym(m).symmetric_eigen();
    eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// [-tol, 0) are clamped to zero; anything below -tol is an error, because
/// a substantially indefinite input signals an assumption violation
/// upstream, not roundoff.
pub fn sqrtm_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = sym(m).symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(Error::NotPsd {
            context: "matrix square root".into(),
            min_eig: min,
        });
    }
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (c, r) in roots.iter().enumerate() {
        scaled.column_mut(c).scale_mut(*r);
    }
    Ok(sym(&(scaled * v.transpose())))
}

/// Solve M X = RHS for symmetric positive definite M via Cholesky.
/// Failure is loud: it means a weight that must be positive definite is not.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match sym(m).cholesky() {
        Some(chol) => Ok(chol.solve(rhs)),
        None => Err(Error::LossOfDefiniteness {
            context: "Cholesky factorization".into(),
            detail: format!("matrix of size {} is not positive definite", m.nrows()),
        }),
    }
}

// ---------------------------------------------------------------------------
// Cubic midpoint interpolation
//
// Computed iterates (Riccati and Lyapunov solutions, gain tables) are known
// at grid nodes only; RK4 needs them at step midpoints too. The 4-point
// cubic midpoint rule (-f[j-1] + 9 f[j] + 9 f[j+1] - f[j+2]) / 16 has O(h^4)
// error, matching the integrator order. Coefficients never go through this
// path; they are synthesized exactly from their builders.
// ---------------------------------------------------------------------------

/// Midpoints of a periodic node sequence (wraps around), `mids[j]` between
/// nodes j and j+1.
pub(crate) fn interp_mids_periodic(nodes: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let n = nodes.len();
    assert!(n >= 4, "periodic midpoint interpolation needs >= 4 nodes");
    (0..n)
        .map(|j| {
            let a = &nodes[(j + n - 1) % n];
            let b = &nodes[j];
            let c = &nodes[(j + 1) % n];
            let d = &nodes[(j + 2) % n];
            (b * 9.0 + c * 9.0 - a - d) / 16.0
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Finite-difference residual stencils
//
// Equation residuals substitute a computed trajectory back into its ODE.
// The 5-point centered stencil has O(h^4) truncation error; the 3-point one
// would itself exceed the 1e-6 residual targets at the default grid.
// ---------------------------------------------------------------------------

/// 5-point centered derivative of a periodic node sequence; `out[j]`
/// approximates the derivative at node j (indices wrap).
pub fn fd_derivative_periodic(nodes: &[DMatrix<f64>], h: f64) -> Vec<DMatrix<f64>> {
    let n = nodes.len();
    assert!(n >= 5, "5-point stencil needs at least 5 nodes");
    (0..n)
        .map(|j| {
            let m2 = &nodes[(j + n - 2) % n];
            let m1 = &nodes[(j + n - 1) % n];
            let p1 = &nodes[(j + 1) % n];
            let p2 = &nodes[(j + 2) % n];
            (m2 - m1 * 8.0 + p1 * 8.0 - p2) / (12.0 * h)
        })
        .collect()
}

/// 5-point centered derivative on the interior of a finite node sequence.
/// Returns (node index, derivative) for j in 2..len-2.
pub fn fd_derivative_interior(nodes: &[DMatrix<f64>], h: f64) -> Vec<(usize, DMatrix<f64>)> {
    let n = nodes.len();
    if n < 5 {
        return Vec::new();
    }
    (2..n - 2)
        .map(|j| {
            let d = (&nodes[j - 2] - &nodes[j - 1] * 8.0 + &nodes[j + 1] * 8.0 - &nodes[j + 2]) / (12.0 * h);
            (j, d)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Exponential decay fitting
// ---------------------------------------------------------------------------

/// Result of a least-squares fit of log(gap) against an abscissa:
/// gap ~ K exp(-lambda * s).
#[derive(Clone, Debug, serde::Serialize)]
pub struct DecayFit {
    pub k: f64,
    pub lambda: f64,
    pub r_squared: f64,
    /// Index range (into the floor-filtered, sorted point list) actually
    /// used after end trimming.
    pub window: (usize, usize),
    pub points_used: usize,
}

/// Fit `gaps ~ K exp(-lambda s)` by least squares on log(gap). Points with
/// gap below GAP_FLOOR are excluded; `drop_fraction` of the remaining
/// points is trimmed from each end of the window before fitting.
pub fn fit_exponential_decay(abscissae: &[f64], gaps: &[f64], drop_fraction: f64) -> Result<DecayFit> {
    if abscissae.len() != gaps.len() {
        return Err(Error::Input(format!(
            "decay fit needs matching lists, got {} abscissae and {} gaps",
            abscissae.len(),
            gaps.len()
        )));
    }
    if abscissae.len() < 8 {
        return Err(Error::InsufficientData {
            context: "decay fit input".into(),
            needed: 8,
            got: abscissae.len(),
        });
    }
    if !(0.0..0.5).contains(&drop_fraction) {
        return Err(Error::Input(format!(
            "drop_fraction must be in [0, 0.5), got {drop_fraction}"
        )));
    }
    let max_gap = gaps.iter().copied().filter(|g| g.is_finite()).fold(0.0, f64::max);
    let floor = GAP_FLOOR.max(RELATIVE_GAP_FLOOR * max_gap);
    let mut pts: Vec<(f64, f64)> = abscissae
        .iter()
        .zip(gaps)
        .filter(|(s, g)| s.is_finite() && g.is_finite() && **g >= floor)
        .map(|(s, g)| (*s, *g))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let drop = (pts.len() as f64 * drop_fraction).floor() as usize;
    let lo = drop;
    let hi = pts.len().saturating_sub(drop);
    let window = &pts[lo.min(hi)..hi];
    if window.len() < 4 {
        return Err(Error::InsufficientData {
            context: "decay fit after floor filtering and trimming".into(),
            needed: 4,
            got: window.len(),
        });
    }

    let n = window.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (s, g) in window {
        let y = g.ln();
        sx += s;
        sy += y;
        sxx += s * s;
        sxy += s * y;
    }
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return Err(Error::InsufficientData {
            context: "decay fit abscissae are degenerate".into(),
            needed: 2,
            got: 1,
        });
    }
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;

    let mean_y = sy / n;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (s, g) in window {
        let y = g.ln();
        let fit = intercept + slope * s;
        ss_res += (y - fit) * (y - fit);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    // A constant series is a perfect fit of a constant; define r^2 = 1 there.
    let r_squared = if ss_tot < 1e-28 {
        if ss_res < 1e-28 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };

    Ok(DecayFit {
        k: intercept.exp(),
        lambda: -slope,
        r_squared,
        window: (lo, hi),
        points_used: window.len(),
    })
}
