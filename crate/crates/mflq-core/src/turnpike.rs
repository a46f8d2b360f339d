//! Turnpike diagnostics: every distance between the finite-horizon solution
//! and the periodic stationary one, exponential rate fits, and the verdict
//! report.
//!
//! The state and control gaps are moments of one joint linear SDE for
//! (X_T, X*) driven by a shared Brownian motion, with X*(0) drawn from the
//! periodic law independently of the (deterministic) initial state. That
//! coupling is what makes the Wasserstein distance a lower bound:
//! W2(t)^2 <= E|X_T(t) - X*(t)|^2 for any coupling, this one included.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{PeriodicTable, ProblemData};
use crate::numerics::{
    fit_exponential_decay, rk4_lattice, sqrtm_psd, sym, DecayFit, Stage, Trajectory,
    FIT_DROP_FRACTION, FIT_R2_PASS, GAP_FLOOR, PSD_TOL,
};
use crate::periodic_lq::{PeriodicLaw, StateMoments};
use crate::riccati::{solve_finite_horizon, FiniteHorizonSolution, PeriodicRiccatiSolution};

// ---------------------------------------------------------------------------
// Gap curves
// ---------------------------------------------------------------------------

/// Per-node distances between the horizon-T solution and the periodic one.
/// `gap_state` and `gap_control` are mean squares, `w2_state` is a distance.
#[derive(Clone, Debug, Default)]
pub struct GapCurves {
    pub t: Vec<f64>,
    pub gap_p: Vec<f64>,
    pub gap_pi: Vec<f64>,
    pub gap_theta: Vec<f64>,
    pub gap_theta_hat: Vec<f64>,
    pub gap_varphi: Vec<f64>,
    pub gap_phi: Vec<f64>,
    pub gap_state: Vec<f64>,
    pub gap_control: Vec<f64>,
    pub w2_state: Vec<f64>,
}

pub const CSV_HEADER: &str =
    "t,gap_P,gap_Pi,gap_Theta,gap_Theta_hat,gap_varphi,gap_phi,gap_state_sq,gap_control_sq,w2_state";

impl GapCurves {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// CSV with every value at full precision (17 significant digits), so
    /// reruns are byte-comparable.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for j in 0..self.len() {
            let row = [
                self.t[j],
                self.gap_p[j],
                self.gap_pi[j],
                self.gap_theta[j],
                self.gap_theta_hat[j],
                self.gap_varphi[j],
                self.gap_phi[j],
                self.gap_state[j],
                self.gap_control[j],
                self.w2_state[j],
            ];
            let mut first = true;
            for v in row {
                if !first {
                    out.push(',');
                }
                out.push_str(&format!("{v:.16e}"));
                first = false;
            }
            out.push('\n');
        }
        out
    }
}

/// |P_T - P|, |Pi_T - Pi|, |Theta_T - Theta|, |Theta_hat_T - Theta_hat| per
/// node, Frobenius norms; the periodic tables wrap across periods.
pub fn riccati_gap_curves(fin: &FiniteHorizonSolution, per: &PeriodicRiccatiSolution) -> GapCurves {
    let total = fin.p.len() - 1;
    let mut curves = GapCurves::default();
    for j in 0..=total {
        curves.t.push(fin.p.time(j));
        let jj = j as i64;
        curves.gap_p.push((fin.p.at(j) - per.p.node(jj)).norm());
        curves.gap_pi.push((fin.pi.at(j) - per.pi.node(jj)).norm());
        curves.gap_theta.push((fin.theta.at(j) - per.theta.node(jj)).norm());
        curves
            .gap_theta_hat
            .push((fin.theta_hat.at(j) - per.theta_hat.node(jj)).norm());
    }
    curves
}

/// |eta - varphi_T| and |phi_T - v*| per node.
pub fn offset_gap_curves(
    fin: &FiniteHorizonSolution,
    eta: &PeriodicTable,
    v_star: &PeriodicTable,
) -> (Vec<f64>, Vec<f64>) {
    let total = fin.varphi.len() - 1;
    let mut gap_varphi = Vec::with_capacity(total + 1);
    let mut gap_phi = Vec::with_capacity(total + 1);
    for j in 0..=total {
        let jj = j as i64;
        gap_varphi.push((eta.node(jj) - fin.varphi.at(j)).norm());
        gap_phi.push((fin.phi.at(j) - v_star.node(jj)).norm());
    }
    (gap_varphi, gap_phi)
}

// ---------------------------------------------------------------------------
// Joint trajectory moments
// ---------------------------------------------------------------------------

/// Moments of the coupled pair (X_T, X*) and the gaps they induce.
/// `cov` is the joint central covariance, 2n x 2n per node.
#[derive(Clone, Debug)]
pub struct TrajectoryGap {
    pub gap_state: Vec<f64>,
    pub gap_control: Vec<f64>,
    pub mean_fin: Vec<DMatrix<f64>>,
    pub mean_per: Vec<DMatrix<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

fn traj_at(tr: &Trajectory, s: Stage) -> DMatrix<f64> {
    match s {
        Stage::Node(j) => tr.at(j as usize).clone(),
        Stage::Mid(_) => tr.eval(s.time(tr.h())),
    }
}

fn block_diag2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut m = DMatrix::zeros(ra + rb, ca + cb);
    m.view_mut((0, 0), (ra, ca)).copy_from(a);
    m.view_mut((ra, ca), (rb, cb)).copy_from(b);
    m
}

fn vstack2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    m
}

/// Propagates the joint Gaussian moments of (X_T, X*) under the shared
/// Brownian coupling and returns E|X_T - X*|^2 and E|u_T - u*|^2 per node.
///
/// The joint mean needs only the mean loops; the central covariance V obeys
/// dV/dt = F V + V F' + G V G' + k k' with F, G the block-diagonal centered
/// closed-loop pairs and k the stacked mean-level diffusion offsets.
pub fn trajectory_gap(
    pr: &ProblemData,
    fin: &FiniteHorizonSolution,
    per: &PeriodicRiccatiSolution,
    law: &PeriodicLaw,
    x: &DVector<f64>,
) -> Result<TrajectoryGap> {
    if x.len() != pr.n {
        return Err(Error::Input(format!(
            "initial state has dimension {}, problem has n = {}",
            x.len(),
            pr.n
        )));
    }
    let n = pr.n;
    let h = pr.h();
    let total = fin.p.len() - 1;
    let cl = &law.closed_loop;

    let x0 = DMatrix::from_column_slice(n, 1, x.as_slice());
    let mu_star0 = law.moments.mu.node(0).clone();
    let v0 = block_diag2(&DMatrix::zeros(n, n), law.moments.sigma.node(0));

    let states = rk4_lattice(
        vec![x0, mu_star0, v0],
        0,
        total,
        h,
        false,
        |s, y| {
            let (m1, m2, v) = (&y[0], &y[1], &y[2]);
            let th_t = traj_at(&fin.theta, s);
            let thh_t = traj_at(&fin.theta_hat, s);
            let phi_t = traj_at(&fin.phi, s);
            let dm1 = (pr.A_hat.at(s) + pr.B_hat.at(s) * &thh_t) * m1
                + pr.B_hat.at(s) * &phi_t
                + pr.b.at(s);
            let dm2 = cl.hat_cal_a.at(s) * m2 + pr.B_hat.at(s) * law.v_star.at(s) + pr.b.at(s);
            let f = block_diag2(
                &(pr.A.at(s) + pr.B.at(s) * &th_t),
                cl.cal_a.at(s),
            );
            let g = block_diag2(
                &(pr.C.at(s) + pr.D.at(s) * &th_t),
                cl.cal_c.at(s),
            );
            let k1 = (pr.C_hat.at(s) + pr.D_hat.at(s) * &thh_t) * m1
                + pr.D_hat.at(s) * &phi_t
                + pr.sigma.at(s);
            let k2 = cl.hat_cal_c.at(s) * m2 + pr.D_hat.at(s) * law.v_star.at(s) + pr.sigma.at(s);
            let k = vstack2(&k1, &k2);
            let dv = &f * v + v * f.transpose() + &g * v * g.transpose() + &k * k.transpose();
            Ok(vec![dm1, dm2, dv])
        },
        |y| y[2] = sym(&y[2]),
    )?;

    let mut out = TrajectoryGap {
        gap_state: Vec::with_capacity(total + 1),
        gap_control: Vec::with_capacity(total + 1),
        mean_fin: Vec::with_capacity(total + 1),
        mean_per: Vec::with_capacity(total + 1),
        cov: Vec::with_capacity(total + 1),
    };
    for (j, st) in states.iter().enumerate() {
        let (m1, m2, v) = (&st[0], &st[1], &st[2]);
        let v11 = v.view((0, 0), (n, n)).clone_owned();
        let v22 = v.view((n, n), (n, n)).clone_owned();
        let v12 = v.view((0, n), (n, n)).clone_owned();
        let dmean = m1 - m2;
        let gap_state = dmean.norm_squared() + (&v11 + &v22 - &v12 - v12.transpose()).trace();
        let jj = j as i64;
        let th_t = fin.theta.at(j);
        let thh_t = fin.theta_hat.at(j);
        let dctrl = thh_t * m1 - per.theta_hat.node(jj) * m2 + fin.phi.at(j)
            - law.v_star.node(jj);
        let th_s = per.theta.node(jj);
        let gap_control = (th_t * &v11 * th_t.transpose()).trace()
            + (th_s * &v22 * th_s.transpose()).trace()
            - 2.0 * (th_t * &v12 * th_s.transpose()).trace()
            + dctrl.norm_squared();
        out.gap_state.push(gap_state);
        out.gap_control.push(gap_control);
        out.mean_fin.push(m1.clone());
        out.mean_per.push(m2.clone());
        out.cov.push(v.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Wasserstein distance between the Gaussian marginals
// ---------------------------------------------------------------------------

/// W2 between N(mu1, s1) and N(mu2, s2):
/// W2^2 = |mu1 - mu2|^2 + tr(s1 + s2 - 2 (s2^{1/2} s1 s2^{1/2})^{1/2}).
pub fn gaussian_w2(
    mu1: &DMatrix<f64>,
    s1: &DMatrix<f64>,
    mu2: &DMatrix<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let root2 = sqrtm_psd(s2, PSD_TOL)?;
    let inner = sqrtm_psd(&sym(&(&root2 * s1 * &root2)), PSD_TOL)?;
    let sq = (mu1 - mu2).norm_squared() + (s1 + s2 - 2.0 * inner).trace();
    Ok(sq.max(0.0).sqrt())
}

/// W2 between the X_T marginal of the joint propagation and the periodic
/// law, per node.
pub fn wasserstein_gap(traj: &TrajectoryGap, moments: &StateMoments) -> Result<Vec<f64>> {
    let n = traj.mean_fin[0].nrows();
    let mut out = Vec::with_capacity(traj.mean_fin.len());
    for j in 0..traj.mean_fin.len() {
        let s1 = traj.cov[j].view((0, 0), (n, n)).clone_owned();
        let jj = j as i64;
        out.push(gaussian_w2(
            &traj.mean_fin[j],
            &s1,
            moments.mu.node(jj),
            moments.sigma.node(jj),
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cost of a feedback triple over a finite horizon
// ---------------------------------------------------------------------------

/// J_T for the control u = Theta (X - EX) + Theta_hat EX + phi from a
/// deterministic start x, by propagating (mean, central covariance) and
/// integrating the moment form of the running cost with the trapezoid rule.
/// With the horizon-T optimal triple this is the value function at x.
pub fn evaluate_cost(
    pr: &ProblemData,
    theta: &Trajectory,
    theta_hat: &Trajectory,
    phi: &Trajectory,
    x: &DVector<f64>,
) -> Result<f64> {
    if x.len() != pr.n {
        return Err(Error::Input(format!(
            "initial state has dimension {}, problem has n = {}",
            x.len(),
            pr.n
        )));
    }
    let n = pr.n;
    let h = pr.h();
    let total = theta.len() - 1;
    if theta_hat.len() != theta.len() || phi.len() != theta.len() {
        return Err(Error::Input(
            "feedback trajectories must share one grid".into(),
        ));
    }

    let x0 = DMatrix::from_column_slice(n, 1, x.as_slice());
    let states = rk4_lattice(
        vec![x0, DMatrix::zeros(n, n)],
        0,
        total,
        h,
        false,
        |s, y| {
            let (m, sig) = (&y[0], &y[1]);
            let th = traj_at(theta, s);
            let thh = traj_at(theta_hat, s);
            let ph = traj_at(phi, s);
            let ca = pr.A.at(s) + pr.B.at(s) * &th;
            let cc = pr.C.at(s) + pr.D.at(s) * &th;
            let w = (pr.C_hat.at(s) + pr.D_hat.at(s) * &thh) * m
                + pr.D_hat.at(s) * &ph
                + pr.sigma.at(s);
            Ok(vec![
                (pr.A_hat.at(s) + pr.B_hat.at(s) * &thh) * m + pr.B_hat.at(s) * &ph + pr.b.at(s),
                &ca * sig + sig * ca.transpose() + &cc * sig * cc.transpose() + &w * w.transpose(),
            ])
        },
        |y| y[1] = sym(&y[1]),
    )?;

    let mut sum = 0.0;
    for (j, st) in states.iter().enumerate() {
        let (m, sig) = (&st[0], &st[1]);
        let s = Stage::Node(j as i64);
        let th = theta.at(j);
        let eu = theta_hat.at(j) * m + phi.at(j);
        let q = pr.Q.at(s);
        let sm = pr.S.at(s);
        let r = pr.R.at(s);
        let quad_state = (q * sig).trace() + (m.transpose() * q * m)[(0, 0)];
        let cross = (sm * sig * th.transpose()).trace() + (eu.transpose() * sm * m)[(0, 0)];
        let quad_control =
            (th.transpose() * r * th * sig).trace() + (eu.transpose() * r * &eu)[(0, 0)];
        let linear =
            2.0 * (pr.q.at(s).transpose() * m)[(0, 0)] + 2.0 * (pr.r.at(s).transpose() * &eu)[(0, 0)];
        let mean_level = (m.transpose() * pr.Q_bar.at(s) * m)[(0, 0)]
            + 2.0 * (eu.transpose() * pr.S_bar.at(s) * m)[(0, 0)]
            + (eu.transpose() * pr.R_bar.at(s) * &eu)[(0, 0)];
        let integrand = quad_state + 2.0 * cross + quad_control + linear + mean_level;
        let weight = if j == 0 || j == total { 0.5 } else { 1.0 };
        sum += weight * integrand;
    }
    Ok(sum * h)
}

// ---------------------------------------------------------------------------
// Rate fitting and the verdict report
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    /// gap below the floor everywhere; nothing to fit, counted as a pass
    DegenerateZero,
    Fail,
}

impl Verdict {
    pub fn passed(self) -> bool {
        !matches!(self, Verdict::Fail)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Pass => "pass",
            Verdict::DegenerateZero => "degenerate-zero",
            Verdict::Fail => "fail",
        };
        f.write_str(s)
    }
}

/// Fit record for one gap family. Backward-decaying families carry `fit`;
/// two-sided families carry `left` (against t) and `right` (against T - t),
/// split at the interior minimum, and `lambda` is the smaller branch rate.
#[derive(Clone, Debug, Serialize)]
pub struct GapFitReport {
    pub name: &'static str,
    pub two_sided: bool,
    pub fit: Option<DecayFit>,
    pub left: Option<DecayFit>,
    pub right: Option<DecayFit>,
    pub lambda: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize)]
pub struct TurnpikeReport {
    pub horizon: f64,
    pub fits: Vec<GapFitReport>,
    pub elapsed_seconds: f64,
    #[serde(skip)]
    pub curves: GapCurves,
}

impl TurnpikeReport {
    pub fn fit(&self, name: &str) -> Option<&GapFitReport> {
        self.fits.iter().find(|f| f.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.fits.iter().all(|f| f.verdict.passed())
    }
}

fn fit_backward(name: &'static str, t: &[f64], gaps: &[f64], horizon: f64) -> Result<GapFitReport> {
    if gaps.iter().all(|g| *g <= GAP_FLOOR) {
        return Ok(GapFitReport {
            name,
            two_sided: false,
            fit: None,
            left: None,
            right: None,
            lambda: None,
            verdict: Verdict::DegenerateZero,
        });
    }
    let s: Vec<f64> = t.iter().map(|t| horizon - t).collect();
    let fit = fit_exponential_decay(&s, gaps, FIT_DROP_FRACTION)?;
    let verdict = if fit.lambda > 0.0 && fit.r_squared >= FIT_R2_PASS {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(GapFitReport {
        name,
        two_sided: false,
        lambda: Some(fit.lambda),
        fit: Some(fit),
        left: None,
        right: None,
        verdict,
    })
}

fn fit_branch(abscissae: &[f64], gaps: &[f64]) -> Option<DecayFit> {
    if gaps.iter().all(|g| *g <= GAP_FLOOR) {
        return None;
    }
    fit_exponential_decay(abscissae, gaps, FIT_DROP_FRACTION).ok()
}

fn fit_two_sided(name: &'static str, t: &[f64], gaps: &[f64], horizon: f64) -> GapFitReport {
    if gaps.iter().all(|g| *g <= GAP_FLOOR) {
        return GapFitReport {
            name,
            two_sided: true,
            fit: None,
            left: None,
            right: None,
            lambda: None,
            verdict: Verdict::DegenerateZero,
        };
    }
    // split at the interior argmin; each branch decays away from its own
    // boundary, so the left fits against t and the right against T - t
    let interior = 1..gaps.len().saturating_sub(1);
    let split = interior
        .clone()
        .min_by(|&a, &b| gaps[a].total_cmp(&gaps[b]))
        .unwrap_or(gaps.len() / 2);
    let left = fit_branch(&t[..=split], &gaps[..=split]);
    let s_right: Vec<f64> = t[split..].iter().map(|t| horizon - t).collect();
    let right = fit_branch(&s_right, &gaps[split..]);
    let lambda = match (&left, &right) {
        (Some(l), Some(r)) => Some(l.lambda.min(r.lambda)),
        (Some(l), None) => Some(l.lambda),
        (None, Some(r)) => Some(r.lambda),
        (None, None) => None,
    };
    let branch_ok = |f: &Option<DecayFit>| {
        f.as_ref()
            .map(|f| f.lambda > 0.0 && f.r_squared >= FIT_R2_PASS)
            .unwrap_or(true)
    };
    let verdict = if left.is_none() && right.is_none() {
        Verdict::DegenerateZero
    } else if branch_ok(&left) && branch_ok(&right) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    GapFitReport {
        name,
        two_sided: true,
        fit: None,
        left,
        right,
        lambda,
        verdict,
    }
}

/// Fits every family in `curves` and assembles the verdicts. Backward
/// families are fitted against T - t; two-sided families are split at the
/// interior minimum and fitted per branch.
pub fn fit_turnpike_rates(curves: GapCurves, horizon: f64) -> Result<TurnpikeReport> {
    let t = &curves.t;
    let mut fits = Vec::with_capacity(9);
    fits.push(fit_backward("gap_P", t, &curves.gap_p, horizon)?);
    fits.push(fit_backward("gap_Pi", t, &curves.gap_pi, horizon)?);
    fits.push(fit_backward("gap_Theta", t, &curves.gap_theta, horizon)?);
    fits.push(fit_backward("gap_Theta_hat", t, &curves.gap_theta_hat, horizon)?);
    fits.push(fit_backward("gap_varphi", t, &curves.gap_varphi, horizon)?);
    fits.push(fit_backward("gap_phi", t, &curves.gap_phi, horizon)?);
    fits.push(fit_two_sided("gap_state_sq", t, &curves.gap_state, horizon));
    fits.push(fit_two_sided("gap_control_sq", t, &curves.gap_control, horizon));
    fits.push(fit_two_sided("w2_state", t, &curves.w2_state, horizon));
    Ok(TurnpikeReport {
        horizon,
        fits,
        elapsed_seconds: 0.0,
        curves,
    })
}

// ---------------------------------------------------------------------------
// End-to-end per-horizon analysis
// ---------------------------------------------------------------------------

/// Solves the horizon, assembles all nine gap curves against the supplied
/// periodic solution, and fits the rates. `periods` is the horizon in whole
/// periods.
pub fn analyze_horizon(
    pr: &ProblemData,
    per: &PeriodicRiccatiSolution,
    law: &PeriodicLaw,
    periods: usize,
    x: &DVector<f64>,
) -> Result<TurnpikeReport> {
    let started = Instant::now();
    let horizon = periods as f64 * pr.tau;
    let fin = solve_finite_horizon(pr, horizon)?;
    let mut curves = riccati_gap_curves(&fin, per);
    let (gap_varphi, gap_phi) = offset_gap_curves(&fin, &law.eta, &law.v_star);
    curves.gap_varphi = gap_varphi;
    curves.gap_phi = gap_phi;
    let traj = trajectory_gap(pr, &fin, per, law, x)?;
    curves.w2_state = wasserstein_gap(&traj, &law.moments)?;
    curves.gap_state = traj.gap_state;
    curves.gap_control = traj.gap_control;
    let mut report = fit_turnpike_rates(curves, horizon)?;
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Analyzes several horizons in parallel; the result order follows the
/// input order, so merging is deterministic.
pub fn analyze_horizons(
    pr: &ProblemData,
    per: &PeriodicRiccatiSolution,
    law: &PeriodicLaw,
    periods: &[usize],
    x: &DVector<f64>,
) -> Result<Vec<TurnpikeReport>> {
    periods
        .par_iter()
        .map(|&k| analyze_horizon(pr, per, law, k, x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mat;
    use crate::periodic_lq::solve_periodic_law;
    use crate::riccati::{solve_stationary, Method, Route};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_benchmark() -> ProblemData {
        ProblemData::builder(1, 1, 1.0)
            .scalar("A", -1.0)
            .scalar("B", 1.0)
            .scalar("Q", 1.0)
            .scalar("R", 1.0)
            .build()
            .unwrap()
    }

    fn scalar_offsets() -> ProblemData {
        ProblemData::builder(1, 1, 1.0)
            .scalar("A", -1.0)
            .scalar("B", 1.0)
            .scalar("Q", 1.0)
            .scalar("R", 1.0)
            .scalar("b", 1.0)
            .scalar("sigma", 0.5)
            .scalar("q", 0.2)
            .scalar("r", 0.1)
            .build()
            .unwrap()
    }

    fn solved(pr: &ProblemData) -> (PeriodicRiccatiSolution, PeriodicLaw) {
        let sol = solve_stationary(pr, Route::Shifted, Method::Kleinman).unwrap();
        let law = solve_periodic_law(pr, &sol).unwrap();
        (sol, law)
    }

    #[test]
    fn riccati_gaps_vanish_for_zero_weights() {
        let pr = ProblemData::builder(1, 1, 1.0)
            .scalar("A", -1.0)
            .scalar("B", 1.0)
            .scalar("R", 1.0)
            .build()
            .unwrap();
        let (sol, _) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 4.0).unwrap();
        let curves = riccati_gap_curves(&fin, &sol);
        assert!(curves.gap_p.iter().all(|g| *g == 0.0));
        assert!(curves.gap_pi.iter().all(|g| *g == 0.0));
        assert!(curves.gap_theta.iter().all(|g| *g == 0.0));
        assert!(curves.gap_theta_hat.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn riccati_gap_rate_and_terminal_value() {
        let pr = scalar_benchmark();
        let (sol, _) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 10.0).unwrap();
        let curves = riccati_gap_curves(&fin, &sol);
        let root2 = 2.0f64.sqrt();
        // the terminal condition P_T(T) = 0 exposes the full periodic value
        assert_abs_diff_eq!(*curves.gap_p.last().unwrap(), root2 - 1.0, epsilon = 1e-8);
        // and the gap has closed to the turnpike at the far end
        assert!(curves.gap_p[0] < 1e-9);

        let report = fit_turnpike_rates(curves, 10.0).unwrap();
        let fit = report.fit("gap_P").unwrap().fit.clone().unwrap();
        // linearizing the P_T flow around P gives decay rate 2 sqrt 2
        let target = 2.0 * root2;
        assert!(
            (fit.lambda - target).abs() <= 0.15 * target,
            "lambda {} vs {}",
            fit.lambda,
            target
        );
        assert!(fit.r_squared >= 0.99, "r2 {}", fit.r_squared);
    }

    #[test]
    fn rate_is_horizon_robust() {
        let pr = scalar_benchmark();
        let (sol, _) = solved(&pr);
        let lambda_at = |horizon: f64| {
            let fin = solve_finite_horizon(&pr, horizon).unwrap();
            let report = fit_turnpike_rates(riccati_gap_curves(&fin, &sol), horizon).unwrap();
            report.fit("gap_P").unwrap().fit.clone().unwrap().lambda
        };
        let l10 = lambda_at(10.0);
        let l20 = lambda_at(20.0);
        assert!(
            (l10 - l20).abs() <= 0.10 * l10.abs(),
            "rates {l10} and {l20} disagree"
        );
    }

    #[test]
    fn offset_gaps_vanish_without_offsets() {
        let pr = scalar_benchmark();
        let (sol, law) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 6.0).unwrap();
        let (gap_varphi, gap_phi) = offset_gap_curves(&fin, &law.eta, &law.v_star);
        assert!(gap_varphi.iter().all(|g| *g == 0.0));
        assert!(gap_phi.iter().all(|g| *g == 0.0));
        drop(sol);
    }

    #[test]
    fn offset_gap_terminal_is_eta_norm() {
        let pr = scalar_offsets();
        let (_, law) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 7.0).unwrap();
        let (gap_varphi, _) = offset_gap_curves(&fin, &law.eta, &law.v_star);
        // varphi_T(T) = 0, so the terminal gap is exactly |eta(T)|
        let eta_norm = law.eta.node((7.0_f64 / pr.h()).round() as i64).norm();
        assert_abs_diff_eq!(*gap_varphi.last().unwrap(), eta_norm, epsilon = 1e-15);
    }

    #[test]
    fn offset_rate_is_half_the_riccati_rate() {
        // the adjoint difference obeys the mean closed loop, rate sqrt 2;
        // the P difference obeys its linearization, which doubles that
        let pr = scalar_offsets();
        let (sol, law) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 10.0).unwrap();
        let mut curves = riccati_gap_curves(&fin, &sol);
        let (gap_varphi, gap_phi) = offset_gap_curves(&fin, &law.eta, &law.v_star);
        curves.gap_varphi = gap_varphi;
        curves.gap_phi = gap_phi;
        let s: Vec<f64> = curves.t.iter().map(|t| 10.0 - t).collect();
        let lam_p = fit_exponential_decay(&s, &curves.gap_p, FIT_DROP_FRACTION)
            .unwrap()
            .lambda;
        let lam_varphi = fit_exponential_decay(&s, &curves.gap_varphi, FIT_DROP_FRACTION)
            .unwrap()
            .lambda;
        let lam_phi = fit_exponential_decay(&s, &curves.gap_phi, FIT_DROP_FRACTION)
            .unwrap()
            .lambda;
        assert!(
            (lam_varphi - 0.5 * lam_p).abs() <= 0.15 * 0.5 * lam_p,
            "varphi rate {lam_varphi} vs half P rate {}",
            0.5 * lam_p
        );
        // the offset control difference is an affine image of the adjoint's
        assert!(
            (lam_phi - lam_varphi).abs() <= 0.15 * lam_varphi,
            "phi rate {lam_phi} vs varphi rate {lam_varphi}"
        );
    }

    #[test]
    fn trajectory_gap_zero_case() {
        let pr = scalar_benchmark();
        let (sol, law) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 5.0).unwrap();
        let traj = trajectory_gap(&pr, &fin, &sol, &law, &DVector::zeros(1)).unwrap();
        assert!(traj.gap_state.iter().all(|g| *g == 0.0));
        assert!(traj.gap_control.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn trajectory_gap_initial_value_exact() {
        let pr = scalar_offsets();
        let (sol, law) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 6.0).unwrap();
        let x = DVector::from_element(1, 5.0);
        let traj = trajectory_gap(&pr, &fin, &sol, &law, &x).unwrap();
        let expected = (5.0 - law.moments.mu.node(0)[(0, 0)]).powi(2)
            + law.moments.sigma.node(0)[(0, 0)];
        assert_abs_diff_eq!(traj.gap_state[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn state_gap_plateaus_in_the_middle() {
        let pr = scalar_offsets();
        let (sol, law) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 20.0).unwrap();
        let x = DVector::from_element(1, 5.0);
        let traj = trajectory_gap(&pr, &fin, &sol, &law, &x).unwrap();
        let total = traj.gap_state.len() - 1;
        let first = traj.gap_state[0];
        let last = traj.gap_state[total];
        let mid_sup = traj.gap_state[total / 3..=2 * total / 3]
            .iter()
            .copied()
            .fold(0.0, f64::max);
        assert!(
            mid_sup <= 1e-4 * first.max(last),
            "plateau {mid_sup} vs boundaries {first}, {last}"
        );
    }

    #[test]
    fn wasserstein_closed_forms() {
        let id = DMatrix::<f64>::identity(2, 2);
        let mu0 = DMatrix::zeros(2, 1);
        // identical Gaussians
        assert_abs_diff_eq!(
            gaussian_w2(&mu0, &id, &mu0, &id).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        // equal covariances: pure translation
        let delta = mat(&[&[3.0], &[4.0]]);
        assert_abs_diff_eq!(
            gaussian_w2(&delta, &id, &mu0, &id).unwrap(),
            5.0,
            epsilon = 1e-12
        );
        // scalar zero means, variances 4 and 1: |2 - 1| = 1
        let z = DMatrix::zeros(1, 1);
        assert_abs_diff_eq!(
            gaussian_w2(
                &z,
                &DMatrix::from_element(1, 1, 4.0),
                &z,
                &DMatrix::from_element(1, 1, 1.0)
            )
            .unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn w2_is_dominated_by_the_coupling_gap() {
        let pr = scalar_offsets();
        let (sol, law) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 10.0).unwrap();
        let x = DVector::from_element(1, 5.0);
        let traj = trajectory_gap(&pr, &fin, &sol, &law, &x).unwrap();
        let w2 = wasserstein_gap(&traj, &law.moments).unwrap();
        for j in 0..w2.len() {
            assert!(
                w2[j] * w2[j] <= traj.gap_state[j] + 1e-8,
                "node {j}: w2^2 {} > state gap {}",
                w2[j] * w2[j],
                traj.gap_state[j]
            );
        }
    }

    #[test]
    fn cost_zero_cases() {
        let pr = ProblemData::builder(1, 1, 1.0)
            .scalar("A", -1.0)
            .scalar("B", 1.0)
            .scalar("R", 1.0)
            .build()
            .unwrap();
        let fin = solve_finite_horizon(&pr, 3.0).unwrap();
        let j = evaluate_cost(&pr, &fin.theta, &fin.theta_hat, &fin.phi, &DVector::zeros(1))
            .unwrap();
        assert_eq!(j, 0.0);

        // offsets all zero, x = 0: the optimal pair is identically zero
        let pr2 = scalar_benchmark();
        let fin2 = solve_finite_horizon(&pr2, 3.0).unwrap();
        let j2 = evaluate_cost(&pr2, &fin2.theta, &fin2.theta_hat, &fin2.phi, &DVector::zeros(1))
            .unwrap();
        assert_eq!(j2, 0.0);
    }

    #[test]
    fn cost_matches_value_function() {
        // deterministic start, no offsets: J = x' Pi_T(0) x
        let pr = scalar_benchmark();
        let fin = solve_finite_horizon(&pr, 5.0).unwrap();
        let x = DVector::from_element(1, 1.0);
        let j = evaluate_cost(&pr, &fin.theta, &fin.theta_hat, &fin.phi, &x).unwrap();
        let value = fin.pi.at(0)[(0, 0)];
        // agreement is limited by the trapezoid rule, O(h^2) at 256 nodes
        assert_abs_diff_eq!(j, value, epsilon = 1e-5);
    }

    #[test]
    fn cost_optimal_beats_perturbed_gains() {
        let pr = scalar_benchmark();
        let fin = solve_finite_horizon(&pr, 5.0).unwrap();
        let x = DVector::from_element(1, 1.0);
        let base = evaluate_cost(&pr, &fin.theta, &fin.theta_hat, &fin.phi, &x).unwrap();
        let bump = |tr: &Trajectory| {
            Trajectory::new(
                tr.t0(),
                tr.h(),
                tr.values().iter().map(|m| m.add_scalar(0.01)).collect(),
            )
        };
        let pert = evaluate_cost(&pr, &bump(&fin.theta), &fin.theta_hat, &fin.phi, &x).unwrap();
        assert!(base <= pert + 1e-12, "{base} > {pert}");

        // perturbing the mean gain does change a deterministic trajectory
        let pert_hat =
            evaluate_cost(&pr, &fin.theta, &bump(&fin.theta_hat), &fin.phi, &x).unwrap();
        assert!(base < pert_hat, "{base} vs {pert_hat}");

        // and on the offsets benchmark a shifted offset costs more
        let pro = scalar_offsets();
        let fino = solve_finite_horizon(&pro, 5.0).unwrap();
        let xo = DVector::from_element(1, 1.0);
        let base_o = evaluate_cost(&pro, &fino.theta, &fino.theta_hat, &fino.phi, &xo).unwrap();
        let pert_o =
            evaluate_cost(&pro, &fino.theta, &fino.theta_hat, &bump(&fino.phi), &xo).unwrap();
        assert!(base_o < pert_o, "{base_o} vs {pert_o}");
    }

    #[test]
    fn fit_recovers_synthetic_curve() {
        let horizon = 10.0;
        let total = 1000usize;
        let h = horizon / total as f64;
        let t: Vec<f64> = (0..=total).map(|j| j as f64 * h).collect();
        let gap: Vec<f64> = t.iter().map(|t| 2.0 * (-3.0 * (horizon - t)).exp()).collect();
        let zeros = vec![0.0; total + 1];
        let curves = GapCurves {
            gap_p: gap,
            gap_pi: zeros.clone(),
            gap_theta: zeros.clone(),
            gap_theta_hat: zeros.clone(),
            gap_varphi: zeros.clone(),
            gap_phi: zeros.clone(),
            gap_state: zeros.clone(),
            gap_control: zeros.clone(),
            w2_state: zeros,
            t,
        };
        let report = fit_turnpike_rates(curves, horizon).unwrap();
        let fit = report.fit("gap_P").unwrap().fit.clone().unwrap();
        assert_abs_diff_eq!(fit.k, 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.lambda, 3.0, epsilon = 1e-6);
        // the identically zero families come back degenerate and passing
        let pi = report.fit("gap_Pi").unwrap();
        assert_eq!(pi.verdict, Verdict::DegenerateZero);
        assert!(pi.verdict.passed());
        assert!(report.all_passed());
    }

    #[test]
    fn gaps_are_shift_consistent() {
        let pr = scalar_benchmark();
        let (sol, _) = solved(&pr);
        let steps = pr.steps;
        let fin6 = solve_finite_horizon(&pr, 6.0).unwrap();
        let fin7 = solve_finite_horizon(&pr, 7.0).unwrap();
        let c6 = riccati_gap_curves(&fin6, &sol);
        let c7 = riccati_gap_curves(&fin7, &sol);
        for j in 0..=6 * steps {
            let d = (c6.gap_p[j] - c7.gap_p[j + steps]).abs();
            assert!(d < 1e-8, "node {j}: {d}");
        }
    }

    #[test]
    fn gap_grows_toward_the_terminal() {
        let pr = scalar_benchmark();
        let (sol, _) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 10.0).unwrap();
        let curves = riccati_gap_curves(&fin, &sol);
        let steps = pr.steps;
        let total = 10 * steps;
        // one period in from the terminal the gap shrinks with each
        // further period of distance
        for k in 1..8usize {
            let g_near = curves.gap_p[total - k * steps];
            let g_far = curves.gap_p[total - (k + 1) * steps];
            assert!(
                g_far <= g_near + 1e-12,
                "k {k}: gap {g_far} exceeds {g_near}"
            );
        }
    }

    #[test]
    fn control_gap_respects_affine_bound() {
        let pr = scalar_offsets();
        let (sol, law) = solved(&pr);
        let fin = solve_finite_horizon(&pr, 8.0).unwrap();
        let x = DVector::from_element(1, 3.0);
        let traj = trajectory_gap(&pr, &fin, &sol, &law, &x).unwrap();
        let n = pr.n;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let j = rng.random_range(0..traj.gap_state.len());
            let jj = j as i64;
            let v11 = traj.cov[j].view((0, 0), (n, n)).clone_owned();
            let v22 = traj.cov[j].view((n, n), (n, n)).clone_owned();
            let th_t = fin.theta.at(j);
            let th_s = sol.theta.node(jj);
            let d = fin.theta_hat.at(j) * &traj.mean_fin[j]
                - sol.theta_hat.node(jj) * &traj.mean_per[j]
                + fin.phi.at(j)
                - law.v_star.node(jj);
            let bound = 3.0
                * ((th_t * &v11 * th_t.transpose()).trace()
                    + (th_s * &v22 * th_s.transpose()).trace()
                    + d.norm_squared());
            assert!(
                traj.gap_control[j] <= bound + 1e-10,
                "node {j}: {} > {}",
                traj.gap_control[j],
                bound
            );
        }
    }

    #[test]
    fn end_to_end_report_on_offsets_benchmark() {
        let pr = scalar_offsets();
        let (sol, law) = solved(&pr);
        let x = DVector::from_element(1, 2.0);
        let report = analyze_horizon(&pr, &sol, &law, 10, &x).unwrap();
        assert!(report.all_passed(), "{:#?}", report.fits);
        for name in ["gap_P", "gap_Pi", "gap_Theta", "gap_Theta_hat", "gap_varphi", "gap_phi"] {
            let f = report.fit(name).unwrap();
            if let Some(fit) = &f.fit {
                assert!(fit.lambda > 0.0, "{name}: lambda {}", fit.lambda);
                assert!(fit.r_squared >= 0.98, "{name}: r2 {}", fit.r_squared);
            } else {
                assert_eq!(f.verdict, Verdict::DegenerateZero, "{name}");
            }
        }
        let csv = report.curves.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), report.curves.len() + 1);

        // parallel multi-horizon analysis returns results in input order
        let reports = analyze_horizons(&pr, &sol, &law, &[3, 2], &x).unwrap();
        assert_eq!(reports.len(), 2);
        assert_abs_diff_eq!(reports[0].horizon, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(reports[1].horizon, 2.0, epsilon = 1e-12);
    }
}
