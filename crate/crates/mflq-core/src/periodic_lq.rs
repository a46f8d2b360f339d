//! The periodic mean-field LQ problem in closed-loop form: closed-loop
//! coefficients, auxiliary cost weights, the periodic adjoint η, the
//! deterministic offset control v*, the periodic state law as a fixed point
//! on Gaussian moments, and the first-order optimality residual.
//!
//! Laws are carried as first and second moments only. The dynamics are
//! linear with deterministic inputs, so every law in sight is Gaussian and
//! (μ, Σ) are sufficient statistics; the abstract fixed point on measures
//! collapses to a fixed point on moments.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{PeriodicTable, ProblemData};
use crate::numerics::{
    min_eigenvalue, rk4_lattice, solve_spd, sym, Stage, COV_SWEEP_CAP, COV_SWEEP_TOL,
};
use crate::riccati::PeriodicRiccatiSolution;
use crate::stability::{affine_fixed_point, is_ms_stable};

fn as_vector(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn as_column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

// ---------------------------------------------------------------------------
// Closed-loop coefficients and auxiliary weights
// ---------------------------------------------------------------------------

/// The state equation under the stationary feedback: 𝒜 = A + BΘ,
/// 𝒞 = C + DΘ drive the centered fluctuation, 𝒜̂ = Â + B̂Θ̂, 𝒞̂ = Ĉ + D̂Θ̂
/// drive the mean, and the bar forms are their differences.
#[derive(Clone, Debug)]
pub struct ClosedLoopCoefficients {
    pub cal_a: PeriodicTable,
    pub cal_c: PeriodicTable,
    pub hat_cal_a: PeriodicTable,
    pub hat_cal_c: PeriodicTable,
    pub bar_cal_a: PeriodicTable,
    pub bar_cal_c: PeriodicTable,
}

pub fn closed_loop_coeffs(pr: &ProblemData, sol: &PeriodicRiccatiSolution) -> ClosedLoopCoefficients {
    let (tau, steps) = (pr.tau, pr.steps);
    let cal_a = PeriodicTable::from_fn(tau, steps, |s| pr.A.at(s) + pr.B.at(s) * sol.theta.at(s));
    let cal_c = PeriodicTable::from_fn(tau, steps, |s| pr.C.at(s) + pr.D.at(s) * sol.theta.at(s));
    let hat_cal_a = PeriodicTable::from_fn(tau, steps, |s| {
        pr.A_hat.at(s) + pr.B_hat.at(s) * sol.theta_hat.at(s)
    });
    let hat_cal_c = PeriodicTable::from_fn(tau, steps, |s| {
        pr.C_hat.at(s) + pr.D_hat.at(s) * sol.theta_hat.at(s)
    });
    let bar_cal_a = PeriodicTable::from_fn(tau, steps, |s| hat_cal_a.at(s) - cal_a.at(s));
    let bar_cal_c = PeriodicTable::from_fn(tau, steps, |s| hat_cal_c.at(s) - cal_c.at(s));
    ClosedLoopCoefficients {
        cal_a,
        cal_c,
        hat_cal_a,
        hat_cal_c,
        bar_cal_a,
        bar_cal_c,
    }
}

/// Weights of the equivalent offset-control problem. R1_hat = R + R1_bar
/// equals R̂ + D̂'PD̂ and stays uniformly positive definite.
#[derive(Clone, Debug)]
pub struct AuxiliaryWeights {
    pub q1_bar: PeriodicTable,
    pub r1_bar: PeriodicTable,
    pub s1_bar: PeriodicTable,
    pub q1: PeriodicTable,
    pub r1: PeriodicTable,
    pub r1_hat: PeriodicTable,
}

impl AuxiliaryWeights {
    /// min over nodes of λ_min(Q̄₁ - S̄₁' R̂₁^{-1} S̄₁); the closed-loop
    /// cost stays convex exactly when this is nonnegative (up to roundoff).
    pub fn psd_identity_min(&self) -> Result<f64> {
        let steps = self.q1_bar.steps() as i64;
        let mut worst = f64::INFINITY;
        for j in 0..steps {
            let s1 = self.s1_bar.node(j);
            let inv_s1 = solve_spd(self.r1_hat.node(j), s1)?;
            let schur = self.q1_bar.node(j) - s1.transpose() * inv_s1;
            worst = worst.min(min_eigenvalue(&schur));
        }
        Ok(worst)
    }
}

pub fn auxiliary_weights(
    pr: &ProblemData,
    sol: &PeriodicRiccatiSolution,
    cl: &ClosedLoopCoefficients,
) -> AuxiliaryWeights {
    let (tau, steps) = (pr.tau, pr.steps);
    let q1_bar = PeriodicTable::from_fn(tau, steps, |s| {
        let hc = cl.hat_cal_c.at(s);
        let th = sol.theta_hat.at(s);
        sym(&(hc.transpose() * sol.p.at(s) * hc
            + pr.Q_hat.at(s)
            + th.transpose() * pr.R_hat.at(s) * th
            + th.transpose() * pr.S_hat.at(s)
            + pr.S_hat.at(s).transpose() * th))
    });
    let r1_bar = PeriodicTable::from_fn(tau, steps, |s| {
        let dh = pr.D_hat.at(s);
        sym(&(pr.R_bar.at(s) + dh.transpose() * sol.p.at(s) * dh))
    });
    let s1_bar = PeriodicTable::from_fn(tau, steps, |s| -pr.B_hat.at(s).transpose() * sol.pi.at(s));
    let q1 = PeriodicTable::from_fn(tau, steps, |s| {
        cl.hat_cal_c.at(s).transpose() * sol.p.at(s) * pr.sigma.at(s)
            + sol.theta_hat.at(s).transpose() * pr.r.at(s)
            + pr.q.at(s)
    });
    let r1 = PeriodicTable::from_fn(tau, steps, |s| {
        pr.D_hat.at(s).transpose() * sol.p.at(s) * pr.sigma.at(s) + pr.r.at(s)
    });
    let r1_hat = PeriodicTable::from_fn(tau, steps, |s| pr.R.at(s) + r1_bar.at(s));
    AuxiliaryWeights {
        q1_bar,
        r1_bar,
        s1_bar,
        q1,
        r1,
        r1_hat,
    }
}

// ---------------------------------------------------------------------------
// Periodic adjoint and offset control
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EtaSolution {
    pub eta: PeriodicTable,
    /// condition number of the fixed-point system I - (one-period map)
    pub condition: f64,
    /// |η(0) - η(τ)| after the closing sweep; roundoff-sized
    pub boundary_mismatch: f64,
}

/// Unique τ-periodic solution of η' + 𝒜̂'η + q₁ + Πb = 0, by a fixed point
/// of the backward one-period map (unique because the mean loop is stable).
pub fn solve_eta(
    pr: &ProblemData,
    sol: &PeriodicRiccatiSolution,
    cl: &ClosedLoopCoefficients,
    aux: &AuxiliaryWeights,
) -> Result<EtaSolution> {
    let (tau, steps, n) = (pr.tau, pr.steps, pr.n);
    let h = pr.h();
    let hat_a = |s: Stage| cl.hat_cal_a.at(s).clone();
    let zero_c = |_: Stage| DMatrix::<f64>::zeros(n, n);
    let v = is_ms_stable(tau, steps, &hat_a, &zero_c)?;
    if !v.stable {
        return Err(Error::NotStable {
            rho: v.spectral_radius,
        });
    }

    let sweep = |end: DMatrix<f64>| -> Result<Vec<DMatrix<f64>>> {
        let states = rk4_lattice(
            vec![end],
            steps as i64,
            steps,
            h,
            true,
            |s, y| {
                Ok(vec![-(cl.hat_cal_a.at(s).transpose() * &y[0]
                    + aux.q1.at(s)
                    + sol.pi.at(s) * pr.b.at(s))])
            },
            |_| {},
        )?;
        Ok(states.into_iter().rev().map(|mut st| st.pop().unwrap()).collect())
    };

    let (fixed, condition) = affine_fixed_point(
        n,
        |x| Ok(as_vector(&sweep(as_column(x))?[0])),
        "periodic adjoint",
    )?;
    let mut nodes = sweep(as_column(&fixed))?;
    let boundary_mismatch = (&nodes[0] - &nodes[steps]).norm();
    nodes.pop();
    Ok(EtaSolution {
        eta: PeriodicTable::from_nodes(tau, nodes),
        condition,
        boundary_mismatch,
    })
}

/// The deterministic offset control v*(t) = -R̂₁(t)^{-1}(B̂(t)'η(t) + r₁(t)).
pub fn v_star(pr: &ProblemData, aux: &AuxiliaryWeights, eta: &PeriodicTable) -> Result<PeriodicTable> {
    PeriodicTable::try_from_fn(pr.tau, pr.steps, |s| {
        let rhs = pr.B_hat.at(s).transpose() * eta.at(s) + aux.r1.at(s);
        Ok(-solve_spd(aux.r1_hat.at(s), &rhs)?)
    })
}

// ---------------------------------------------------------------------------
// Periodic state law on moments
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StateMoments {
    /// mean of the periodic law
    pub mu: PeriodicTable,
    /// central covariance of the periodic law
    pub sigma: PeriodicTable,
    /// condition number of the mean fixed-point system
    pub mu_condition: f64,
    /// observed per-period contraction of the covariance sweep
    pub contraction_factor: f64,
    pub sweeps: usize,
    /// per-sweep change norms, for decay diagnostics
    pub changes: Vec<f64>,
    /// most negative eigenvalue of a sweep increment; the zero start makes
    /// the sweep monotone nondecreasing in the PSD order
    pub monotonicity_witness: f64,
}

/// Unique periodic (μ, Σ): the mean by a fixed point of the forward
/// one-period affine map, the covariance by forward sweeps from zero.
/// The mean is re-integrated inside every covariance sweep from its fixed
/// initial value, so Σ sees stage-consistent μ.
pub fn periodic_state_moments(
    pr: &ProblemData,
    cl: &ClosedLoopCoefficients,
    v: &PeriodicTable,
) -> Result<StateMoments> {
    let (tau, steps, n) = (pr.tau, pr.steps, pr.n);
    let h = pr.h();

    let mu_rhs = |s: Stage, mu: &DMatrix<f64>| {
        cl.hat_cal_a.at(s) * mu + pr.B_hat.at(s) * v.at(s) + pr.b.at(s)
    };
    let (mu_fixed, mu_condition) = affine_fixed_point(
        n,
        |x| {
            let states = rk4_lattice(
                vec![as_column(x)],
                0,
                steps,
                h,
                false,
                |s, y| Ok(vec![mu_rhs(s, &y[0])]),
                |_| {},
            )?;
            Ok(as_vector(&states[steps][0]))
        },
        "periodic mean",
    )?;
    let mu0 = as_column(&mu_fixed);

    let mut sigma0 = DMatrix::<f64>::zeros(n, n);
    let mut changes: Vec<f64> = Vec::new();
    let mut witness = f64::INFINITY;
    for sweep in 1..=COV_SWEEP_CAP {
        let states = rk4_lattice(
            vec![mu0.clone(), sigma0.clone()],
            0,
            steps,
            h,
            false,
            |s, y| {
                let (mu, sig) = (&y[0], &y[1]);
                let ca = cl.cal_a.at(s);
                let cc = cl.cal_c.at(s);
                let w = cl.hat_cal_c.at(s) * mu + pr.D_hat.at(s) * v.at(s) + pr.sigma.at(s);
                Ok(vec![
                    mu_rhs(s, mu),
                    ca * sig + sig * ca.transpose() + cc * sig * cc.transpose()
                        + &w * w.transpose(),
                ])
            },
            |y| y[1] = sym(&y[1]),
        )?;
        let sigma_end = states[steps][1].clone();
        let delta = &sigma_end - &sigma0;
        let change = delta.norm();
        changes.push(change);
        witness = witness.min(min_eigenvalue(&delta));
        if witness < -1e-8 {
            return Err(Error::Internal(format!(
                "covariance sweep lost monotone PSD order at sweep {sweep} (min eig {witness:.3e})"
            )));
        }
        if change < COV_SWEEP_TOL {
            let mu_nodes = (0..steps).map(|j| states[j][0].clone()).collect();
            let sigma_nodes = (0..steps).map(|j| states[j][1].clone()).collect();
            let mut ratios = Vec::new();
            for k in 1..changes.len() {
                if changes[k - 1] > 1e-12 && changes[k] > 1e-12 {
                    ratios.push(changes[k] / changes[k - 1]);
                }
            }
            let contraction_factor = if ratios.is_empty() {
                0.0
            } else {
                (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp()
            };
            return Ok(StateMoments {
                mu: PeriodicTable::from_nodes(tau, mu_nodes),
                sigma: PeriodicTable::from_nodes(tau, sigma_nodes),
                mu_condition,
                contraction_factor,
                sweeps: sweep,
                changes,
                monotonicity_witness: witness,
            });
        }
        sigma0 = sigma_end;
    }
    Err(Error::NoConvergence {
        what: "periodic covariance sweep".into(),
        limit: COV_SWEEP_CAP,
        last_change: changes.last().copied().unwrap_or(f64::INFINITY),
    })
}

// ---------------------------------------------------------------------------
// Optimality
// ---------------------------------------------------------------------------

/// Sup norm over nodes of the stationarity expression
/// B̂'𝒴 + S̄₁μ* + Rv + R̄₁v + r₁ with 𝒴 = Πμ* + η. Near zero certifies the
/// first-order condition for the computed periodic pair.
pub fn optimality_residual(
    pr: &ProblemData,
    sol: &PeriodicRiccatiSolution,
    aux: &AuxiliaryWeights,
    eta: &PeriodicTable,
    v: &PeriodicTable,
    moments: &StateMoments,
) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..pr.steps as i64 {
        let s = Stage::Node(j);
        let mu = moments.mu.at(s);
        let y = sol.pi.at(s) * mu + eta.at(s);
        let expr = pr.B_hat.at(s).transpose() * y
            + aux.s1_bar.at(s) * mu
            + pr.R.at(s) * v.at(s)
            + aux.r1_bar.at(s) * v.at(s)
            + aux.r1.at(s);
        worst = worst.max(expr.norm());
    }
    worst
}

/// One-period cost of the periodic law driven by offset control v under the
/// stationary feedback, from moment formulas alone: with Eu = Θ̂μ + v and
/// central covariance Σ,
///   E⟨Qx,x⟩ = tr(QΣ) + μ'Qμ,  E⟨Sx,u⟩ = tr(SΣΘ') + ⟨Sμ, Eu⟩,
///   E⟨Ru,u⟩ = tr(Θ'RΘΣ) + Eu'R Eu,
/// plus the mean-level weights and the linear terms.
pub fn periodic_cost(
    pr: &ProblemData,
    sol: &PeriodicRiccatiSolution,
    cl: &ClosedLoopCoefficients,
    v: &PeriodicTable,
) -> Result<f64> {
    let moments = periodic_state_moments(pr, cl, v)?;
    let h = pr.h();
    let mut total = 0.0;
    for j in 0..pr.steps as i64 {
        let s = Stage::Node(j);
        let mu = moments.mu.at(s);
        let sig = moments.sigma.at(s);
        let th = sol.theta.at(s);
        let eu = sol.theta_hat.at(s) * mu + v.at(s);
        let q = pr.Q.at(s);
        let sm = pr.S.at(s);
        let r = pr.R.at(s);
        let quad_state = (q * sig).trace() + (mu.transpose() * q * mu)[(0, 0)];
        let cross = (sm * sig * th.transpose()).trace() + (eu.transpose() * sm * mu)[(0, 0)];
        let quad_control =
            (th.transpose() * r * th * sig).trace() + (eu.transpose() * r * &eu)[(0, 0)];
        let linear = 2.0 * (pr.q.at(s).transpose() * mu)[(0, 0)]
            + 2.0 * (pr.r.at(s).transpose() * &eu)[(0, 0)];
        let mean_level = (mu.transpose() * pr.Q_bar.at(s) * mu)[(0, 0)]
            + 2.0 * (eu.transpose() * pr.S_bar.at(s) * mu)[(0, 0)]
            + (eu.transpose() * pr.R_bar.at(s) * &eu)[(0, 0)];
        total += quad_state + 2.0 * cross + quad_control + linear + mean_level;
    }
    Ok(total * h)
}

// ---------------------------------------------------------------------------
// Assembled law
// ---------------------------------------------------------------------------

/// Everything the periodic problem produces, with its diagnostics.
#[derive(Clone, Debug)]
pub struct PeriodicLaw {
    pub closed_loop: ClosedLoopCoefficients,
    pub weights: AuxiliaryWeights,
    pub eta: PeriodicTable,
    pub v_star: PeriodicTable,
    pub moments: StateMoments,
    pub eta_condition: f64,
    pub eta_boundary_mismatch: f64,
    /// min over nodes of λ_min(Q̄₁ - S̄₁'R̂₁^{-1}S̄₁)
    pub psd_identity_min: f64,
    pub optimality_residual: f64,
}

pub fn solve_periodic_law(pr: &ProblemData, sol: &PeriodicRiccatiSolution) -> Result<PeriodicLaw> {
    let cl = closed_loop_coeffs(pr, sol);
    let aux = auxiliary_weights(pr, sol, &cl);
    let psd_identity_min = aux.psd_identity_min()?;
    let eta_sol = solve_eta(pr, sol, &cl, &aux)?;
    let v = v_star(pr, &aux, &eta_sol.eta)?;
    let moments = periodic_state_moments(pr, &cl, &v)?;
    let residual = optimality_residual(pr, sol, &aux, &eta_sol.eta, &v, &moments);
    Ok(PeriodicLaw {
        closed_loop: cl,
        weights: aux,
        eta: eta_sol.eta,
        v_star: v,
        moments,
        eta_condition: eta_sol.condition,
        eta_boundary_mismatch: eta_sol.boundary_mismatch,
        psd_identity_min,
        optimality_residual: residual,
    })
}
