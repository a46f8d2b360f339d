//! Mean-square stability and its companions: the one-period second-moment
//! monodromy, periodic Lyapunov equations, exact-detectability testing, and
//! stabilizer synthesis by Riccati gain iteration.
//!
//! The second moment M(t) = E[X(t)X(t)'] of the closed system
//! dX = A X dt + C X dW obeys dM/dt = AM + MA' + CMC'. The system is
//! mean-square exponentially stable exactly when the spectral radius of the
//! one-period map of that flow is below one; everything in this module is a
//! view of that map.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{lattice_stages, PeriodicTable};
use crate::numerics::{
    min_eigenvalue, rk4_lattice, solve_spd, sym, Stage, HORIZON_EXT_CAP, KLEINMAN_CAP,
    KLEINMAN_TOL, LYAP_SWEEP_CAP, LYAP_SWEEP_TOL, STABILITY_MARGIN,
};

/// Borrowed view of a periodic coefficient on the lattice; both problem
/// coefficients and computed tables coerce to this via small closures.
pub type Coeff<'a> = &'a dyn Fn(Stage) -> DMatrix<f64>;

/// Gramian heuristic horizon, in periods.
pub const GRAMIAN_PERIODS: usize = 4;

/// Relative rank tolerance for singular-value and Gramian rank decisions.
pub const RANK_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Orthonormal basis of symmetric matrices
// ---------------------------------------------------------------------------

pub(crate) fn sym_dim(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Coordinates in the orthonormal basis {e_i e_i', (e_i e_j' + e_j e_i')/√2}
/// so Frobenius inner products become dot products.
pub(crate) fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut v = DVector::zeros(sym_dim(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            v[k] = if i == j {
                m[(i, i)]
            } else {
                std::f64::consts::SQRT_2 * m[(i, j)]
            };
            k += 1;
        }
    }
    v
}

pub(crate) fn smat(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    let half = 1.0 / std::f64::consts::SQRT_2;
    for i in 0..n {
        for j in i..n {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                m[(i, j)] = v[k] * half;
                m[(j, i)] = v[k] * half;
            }
            k += 1;
        }
    }
    m
}

fn sym_basis(n: usize) -> Vec<DMatrix<f64>> {
    (0..sym_dim(n))
        .map(|k| {
            let mut v = DVector::zeros(sym_dim(n));
            v[k] = 1.0;
            smat(&v, n)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Moment flow and monodromy
// ---------------------------------------------------------------------------

/// Lifted transition matrices of the second-moment flow: `phi[j]` maps
/// svec(M(0)) to svec(M(t_j)) for j = 0..=steps, so `phi[steps]` is the
/// one-period monodromy.
pub(crate) struct MomentFlow {
    pub phi: Vec<DMatrix<f64>>,
}

impl MomentFlow {
    pub fn monodromy(&self) -> &DMatrix<f64> {
        self.phi.last().unwrap()
    }
}

pub(crate) fn moment_flow(period: f64, steps: usize, a: Coeff, c: Coeff) -> Result<MomentFlow> {
    let n = a(Stage::Node(0)).nrows();
    let h = period / steps as f64;
    let states = rk4_lattice(
        sym_basis(n),
        0,
        steps,
        h,
        false,
        |s, ms| {
            let am = a(s);
            let cm = c(s);
            Ok(ms
                .iter()
                .map(|m| &am * m + m * am.transpose() + &cm * m * cm.transpose())
                .collect())
        },
        |ms| {
            for m in ms.iter_mut() {
                *m = sym(m);
            }
        },
    )?;
    let nu = sym_dim(n);
    let phi = states
        .iter()
        .map(|ms| {
            let mut p = DMatrix::zeros(nu, nu);
            for (k, m) in ms.iter().enumerate() {
                p.set_column(k, &svec(m));
            }
            p
        })
        .collect();
    Ok(MomentFlow { phi })
}

/// One-period map of the second-moment flow, as a matrix on the fixed
/// orthonormal basis of symmetric n×n matrices (dimension n(n+1)/2).
pub fn moment_monodromy(period: f64, steps: usize, a: Coeff, c: Coeff) -> Result<DMatrix<f64>> {
    Ok(moment_flow(period, steps, a, c)?.phi.pop().unwrap())
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Mean-square exponential stability verdict.
#[derive(Clone, Debug, Serialize)]
pub struct StabilityVerdict {
    /// spectral radius of the one-period second-moment map
    pub spectral_radius: f64,
    pub stable: bool,
    pub margin: f64,
    /// −log(ρ)/τ, present when ρ < 1
    pub decay_rate_estimate: Option<f64>,
}

fn verdict_from_rho(rho: f64, period: f64) -> StabilityVerdict {
    StabilityVerdict {
        spectral_radius: rho,
        stable: rho < 1.0 - STABILITY_MARGIN,
        margin: STABILITY_MARGIN,
        decay_rate_estimate: (rho < 1.0).then(|| -rho.ln() / period),
    }
}

pub fn is_ms_stable(period: f64, steps: usize, a: Coeff, c: Coeff) -> Result<StabilityVerdict> {
    let mono = moment_monodromy(period, steps, a, c)?;
    Ok(verdict_from_rho(spectral_radius(&mono), period))
}

// ---------------------------------------------------------------------------
// Periodic Lyapunov equation
// ---------------------------------------------------------------------------

/// One backward RK4 sweep of P' + PA + A'P + C'PC + Λ = 0 over a period,
/// from the supplied value at t = τ; returns nodes 0..=steps in forward
/// time order.
fn lyapunov_backward_sweep(
    period: f64,
    steps: usize,
    a: Coeff,
    c: Coeff,
    lambda: Coeff,
    end: DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let h = period / steps as f64;
    let states = rk4_lattice(
        vec![end],
        steps as i64,
        steps,
        h,
        true,
        |s, y| {
            let am = a(s);
            let cm = c(s);
            let p = &y[0];
            Ok(vec![-(p * &am + am.transpose() * p + cm.transpose() * p * &cm + lambda(s))])
        },
        |y| y[0] = sym(&y[0]),
    )?;
    Ok(states.into_iter().rev().map(|mut v| v.pop().unwrap()).collect())
}

/// Unique τ-periodic solution of P' + PA + A'P + C'PC + Λ = 0 for a
/// mean-square stable pair, by backward sweeps from zero until the
/// one-period boundary map reaches its fixed point. Refuses unstable pairs.
pub fn solve_periodic_lyapunov(
    period: f64,
    steps: usize,
    a: Coeff,
    c: Coeff,
    lambda: Coeff,
) -> Result<PeriodicTable> {
    let verdict = is_ms_stable(period, steps, a, c)?;
    if !verdict.stable {
        return Err(Error::NotStable {
            rho: verdict.spectral_radius,
        });
    }
    let n = a(Stage::Node(0)).nrows();
    let mut end = DMatrix::zeros(n, n);
    let mut last_change = f64::INFINITY;
    for _ in 0..LYAP_SWEEP_CAP {
        let vals = lyapunov_backward_sweep(period, steps, a, c, lambda, end.clone())?;
        let start = vals[0].clone();
        last_change = (&start - &end).norm();
        if last_change < LYAP_SWEEP_TOL {
            let mut nodes = vals;
            nodes.pop(); // node `steps` repeats node 0
            return Ok(PeriodicTable::from_nodes(period, nodes));
        }
        end = start;
    }
    Err(Error::NoConvergence {
        what: "periodic Lyapunov sweep".into(),
        limit: LYAP_SWEEP_CAP,
        last_change,
    })
}

/// Fixed point of an affine map, probed column by column. `map` must be
/// affine in its argument (our one-period integration maps are). Also
/// returns the condition number of the fixed-point system I - L.
pub(crate) fn affine_fixed_point<F>(
    dim: usize,
    map: F,
    what: &str,
) -> Result<(DVector<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let w = map(&DVector::zeros(dim))?;
    let mut lin = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let mut e = DVector::zeros(dim);
        e[k] = 1.0;
        lin.set_column(k, &(map(&e)? - &w));
    }
    let svd = (DMatrix::identity(dim, dim) - lin).svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let smin = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smin > 1e-12 * smax.max(1.0)) {
        return Err(Error::Internal(format!(
            "{what}: periodic fixed-point system is singular (a characteristic multiplier equals one)"
        )));
    }
    let x = svd
        .solve(&w, 0.0)
        .map_err(|msg| Error::Internal(format!("{what}: {msg}")))?;
    Ok((x, smax / smin))
}

/// Periodic Lyapunov solution via the one-period affine fixed point. Does
/// not require stability; the solution can be indefinite for unstable
/// pairs. Used by cross-checks where the sweep preconditions do not hold.
pub fn solve_periodic_lyapunov_monodromy(
    period: f64,
    steps: usize,
    a: Coeff,
    c: Coeff,
    lambda: Coeff,
) -> Result<PeriodicTable> {
    let n = a(Stage::Node(0)).nrows();
    let (fixed, _) = affine_fixed_point(
        sym_dim(n),
        |v| {
            let vals = lyapunov_backward_sweep(period, steps, a, c, lambda, smat(v, n))?;
            Ok(svec(&vals[0]))
        },
        "periodic Lyapunov",
    )?;
    let mut nodes = lyapunov_backward_sweep(period, steps, a, c, lambda, smat(&fixed, n))?;
    nodes.pop();
    Ok(PeriodicTable::from_nodes(period, nodes))
}

// ---------------------------------------------------------------------------
// Exact detectability
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectabilityMethod {
    FullRankE,
    StableSystem,
    GramianHeuristic,
}

/// Three-valued verdict: the sufficient tests prove detectability, the
/// Gramian test can also prove the negative when the observation functional
/// vanishes identically, and everything else is inconclusive.
#[derive(Clone, Debug, Serialize)]
pub struct DetectabilityVerdict {
    pub method: DetectabilityMethod,
    pub detectable: Option<bool>,
    pub evidence: String,
    /// min over the grid of the n-th singular value of E
    pub min_sigma_n: f64,
    /// spectral radius of the uncontrolled moment monodromy
    pub spectral_radius: f64,
}

/// Decide exact detectability of the pair [A, C | E] by three branches in
/// order: full column rank of E on the grid; mean-square stability of
/// (A, C); a discrete observability Gramian of the lifted moment flow over
/// GRAMIAN_PERIODS periods.
pub fn detectability_test(
    period: f64,
    steps: usize,
    a: Coeff,
    c: Coeff,
    e: Coeff,
) -> Result<DetectabilityVerdict> {
    let n = a(Stage::Node(0)).nrows();

    let mut min_sigma = f64::INFINITY;
    let mut max_sigma: f64 = 0.0;
    for s in lattice_stages(steps) {
        let em = e(s);
        let svals = em.singular_values();
        max_sigma = max_sigma.max(svals.iter().copied().fold(0.0, f64::max));
        let nth = if em.nrows() < n {
            0.0
        } else {
            svals.iter().copied().fold(f64::INFINITY, f64::min)
        };
        min_sigma = min_sigma.min(nth);
    }

    let flow = moment_flow(period, steps, a, c)?;
    let rho = spectral_radius(flow.monodromy());

    if min_sigma > RANK_TOL * max_sigma.max(1.0) {
        return Ok(DetectabilityVerdict {
            method: DetectabilityMethod::FullRankE,
            detectable: Some(true),
            evidence: format!(
                "E has full column rank over the whole grid (n-th singular value >= {min_sigma:.3e})"
            ),
            min_sigma_n: min_sigma,
            spectral_radius: rho,
        });
    }

    if rho < 1.0 - STABILITY_MARGIN {
        return Ok(DetectabilityVerdict {
            method: DetectabilityMethod::StableSystem,
            detectable: Some(true),
            evidence: format!("the pair is mean-square stable (spectral radius {rho:.9})"),
            min_sigma_n: min_sigma,
            spectral_radius: rho,
        });
    }

    // Gramian heuristic: observe tr(E'E M(t)) along the lifted flow started
    // from each basis element, across several periods.
    let nu = sym_dim(n);
    let mono = flow.monodromy().clone();
    let base: Vec<DVector<f64>> = (0..steps)
        .map(|j| {
            let ej = e(Stage::Node(j as i64));
            flow.phi[j].transpose() * svec(&sym(&(ej.transpose() * &ej)))
        })
        .collect();
    let mut gram = DMatrix::zeros(nu, nu);
    let mut pow_t = DMatrix::identity(nu, nu);
    for _ in 0..GRAMIAN_PERIODS {
        for v0 in &base {
            let v = &pow_t * v0;
            gram += &v * v.transpose();
        }
        pow_t = mono.transpose() * pow_t;
    }
    let eig = sym(&gram).symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let rank = eig
        .eigenvalues
        .iter()
        .filter(|&&l| l > RANK_TOL * lam_max)
        .count();

    if lam_max > 0.0 && rank == nu {
        Ok(DetectabilityVerdict {
            method: DetectabilityMethod::GramianHeuristic,
            detectable: Some(true),
            evidence: format!(
                "moment observability Gramian over {GRAMIAN_PERIODS} periods has full rank {nu}"
            ),
            min_sigma_n: min_sigma,
            spectral_radius: rho,
        })
    } else if lam_max <= 1e-30 {
        // The observation functional vanishes identically while the moment
        // flow does not decay: some trajectory is invisible and does not
        // converge.
        Ok(DetectabilityVerdict {
            method: DetectabilityMethod::GramianHeuristic,
            detectable: Some(false),
            evidence: format!(
                "observation functional is identically zero on the grid while the \
                 moment flow has spectral radius {rho:.6} >= 1"
            ),
            min_sigma_n: min_sigma,
            spectral_radius: rho,
        })
    } else {
        Ok(DetectabilityVerdict {
            method: DetectabilityMethod::GramianHeuristic,
            detectable: None,
            evidence: format!(
                "moment observability Gramian has rank {rank} of {nu}; the sufficient \
                 tests do not decide this pair"
            ),
            min_sigma_n: min_sigma,
            spectral_radius: rho,
        })
    }
}

// ---------------------------------------------------------------------------
// Stabilizer synthesis (Riccati gain iteration)
// ---------------------------------------------------------------------------

/// Result of a converged gain iteration.
#[derive(Clone, Debug)]
pub struct StabilizerSynthesis {
    /// periodic Riccati solution
    pub p: PeriodicTable,
    /// stabilizing feedback gain
    pub theta: PeriodicTable,
    pub iterations: usize,
    /// most negative eigenvalue of P_{i-1} - P_i over all iterates and
    /// nodes; the iteration is monotonically decreasing, so this stays
    /// above -1e-8
    pub monotonicity_witness: f64,
    pub detectability: DetectabilityVerdict,
}

/// Gain from a Riccati iterate: Θ = -(N + D'PD)^{-1}(B'P + D'PC + S).
pub(crate) fn gain_from_p(
    period: f64,
    steps: usize,
    p: &PeriodicTable,
    b: Coeff,
    c: Coeff,
    d: Coeff,
    s_cross: Coeff,
    n_weight: Coeff,
) -> Result<PeriodicTable> {
    PeriodicTable::try_from_fn(period, steps, |s| {
        let pm = p.at(s);
        let bm = b(s);
        let dm = d(s);
        let w = n_weight(s) + dm.transpose() * pm * &dm;
        let g = bm.transpose() * pm + dm.transpose() * pm * c(s) + s_cross(s);
        Ok(-solve_spd(&w, &g)?)
    })
}

/// Gain iteration for the periodic Riccati equation
/// P' + PA + A'P + C'PC + Q - (PB + C'PD + S')(N + D'PD)^{-1}(B'P + D'PC + S) = 0.
/// Each pass solves the closed-loop periodic Lyapunov equation under the
/// current gain (source Q + Θ'S + S'Θ + Θ'NΘ) and refreshes the gain from
/// the result; the iterates decrease monotonically to the stabilizing
/// solution. `theta_init` must stabilize (A + BΘ, C + DΘ).
#[allow(clippy::too_many_arguments)]
pub(crate) fn kleinman_with_cross(
    period: f64,
    steps: usize,
    a: Coeff,
    c: Coeff,
    b: Coeff,
    d: Coeff,
    q_weight: Coeff,
    s_cross: Coeff,
    n_weight: Coeff,
    theta_init: &PeriodicTable,
) -> Result<(PeriodicTable, PeriodicTable, usize, f64)> {
    let mut theta = theta_init.clone();
    let mut prev_p: Option<PeriodicTable> = None;
    let mut witness = f64::INFINITY;
    let mut last_change = f64::INFINITY;
    for iter in 1..=KLEINMAN_CAP {
        let a_cl = |s: Stage| a(s) + b(s) * theta.at(s);
        let c_cl = |s: Stage| c(s) + d(s) * theta.at(s);
        let source = |s: Stage| {
            let th = theta.at(s);
            let sc = s_cross(s);
            sym(&(q_weight(s)
                + th.transpose() * &sc
                + sc.transpose() * th
                + th.transpose() * n_weight(s) * th))
        };
        let p = solve_periodic_lyapunov(period, steps, &a_cl, &c_cl, &source).map_err(|e| {
            match e {
                Error::NotStable { rho } => Error::Internal(format!(
                    "closed loop lost mean-square stability at gain iteration {iter} \
                     (spectral radius {rho:.9})"
                )),
                other => other,
            }
        })?;
        if let Some(pp) = &prev_p {
            let step_witness = (0..steps as i64)
                .map(|j| min_eigenvalue(&(pp.node(j) - p.node(j))))
                .fold(f64::INFINITY, f64::min);
            witness = witness.min(step_witness);
            last_change = pp.sup_diff(&p);
            if last_change < KLEINMAN_TOL {
                let theta_final = gain_from_p(period, steps, &p, b, c, d, s_cross, n_weight)?;
                return Ok((p, theta_final, iter, witness));
            }
        }
        theta = gain_from_p(period, steps, &p, b, c, d, s_cross, n_weight)?;
        prev_p = Some(p);
    }
    Err(Error::NoConvergence {
        what: "Riccati gain iteration".into(),
        limit: KLEINMAN_CAP,
        last_change,
    })
}

/// Initial stabilizing gain: zero when the open loop is already stable;
/// otherwise candidates from the deterministic part (diffusion dropped)
/// with inflated state penalty M + ηI, η ∈ {1, 10, 100}, each tested on the
/// full stochastic loop.
#[allow(clippy::too_many_arguments)]
pub(crate) fn initial_stabilizer(
    period: f64,
    steps: usize,
    a: Coeff,
    c: Coeff,
    b: Coeff,
    d: Coeff,
    m_weight: Coeff,
    n_weight: Coeff,
) -> Result<PeriodicTable> {
    let n = a(Stage::Node(0)).nrows();
    let m = b(Stage::Node(0)).ncols();
    let open = is_ms_stable(period, steps, a, c)?;
    if open.stable {
        return Ok(PeriodicTable::from_fn(period, steps, |_| DMatrix::zeros(m, n)));
    }
    let mut attempts = Vec::new();
    for eta in [1.0, 10.0, 100.0] {
        match deterministic_gain_candidate(period, steps, a, b, m_weight, n_weight, eta) {
            Ok(gamma) => {
                let a_cl = |s: Stage| a(s) + b(s) * gamma.at(s);
                let c_cl = |s: Stage| c(s) + d(s) * gamma.at(s);
                let v = is_ms_stable(period, steps, &a_cl, &c_cl)?;
                if v.stable {
                    return Ok(gamma);
                }
                attempts.push(format!(
                    "eta = {eta}: candidate leaves spectral radius {:.6}",
                    v.spectral_radius
                ));
            }
            Err(err) => attempts.push(format!("eta = {eta}: {err}")),
        }
    }
    Err(Error::NotStabilizable(format!(
        "open loop is unstable and no deterministic-part candidate stabilizes the \
         stochastic loop ({})",
        attempts.join("; ")
    )))
}

/// Seed-free periodic solve of the deterministic Riccati equation
/// P' + PA + A'P + (M + ηI) - PBN^{-1}B'P = 0 by horizon extension:
/// backward one-period sweeps from zero until successive restrictions
/// agree. Loose tolerance; the result only seeds the gain iteration.
fn deterministic_gain_candidate(
    period: f64,
    steps: usize,
    a: Coeff,
    b: Coeff,
    m_weight: Coeff,
    n_weight: Coeff,
    eta: f64,
) -> Result<PeriodicTable> {
    let n = a(Stage::Node(0)).nrows();
    let h = period / steps as f64;
    let inflate = DMatrix::<f64>::identity(n, n) * eta;
    let sweep = |end: DMatrix<f64>| -> Result<Vec<DMatrix<f64>>> {
        let states = rk4_lattice(
            vec![end],
            steps as i64,
            steps,
            h,
            true,
            |s, y| {
                let p = &y[0];
                let am = a(s);
                let bm = b(s);
                let ninv_btp = solve_spd(&n_weight(s), &(bm.transpose() * p))?;
                Ok(vec![
                    -(p * &am + am.transpose() * p + m_weight(s) + &inflate)
                        + p * &bm * ninv_btp,
                ])
            },
            |y| y[0] = sym(&y[0]),
        )?;
        Ok(states.into_iter().rev().map(|mut v| v.pop().unwrap()).collect())
    };

    let mut end = DMatrix::zeros(n, n);
    let mut prev: Option<Vec<DMatrix<f64>>> = None;
    let mut last_change = f64::INFINITY;
    for _ in 0..HORIZON_EXT_CAP {
        let vals = sweep(end.clone())?;
        if let Some(pv) = &prev {
            last_change = vals
                .iter()
                .zip(pv)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max);
            // seed quality only; tighter convergence happens in the gain
            // iteration itself
            if last_change < 1e-6 {
                let mut nodes = vals;
                nodes.pop();
                let p = PeriodicTable::from_nodes(period, nodes);
                return PeriodicTable::try_from_fn(period, steps, |s| {
                    Ok(-solve_spd(&n_weight(s), &(b(s).transpose() * p.at(s)))?)
                });
            }
        }
        end = vals[0].clone();
        prev = Some(vals);
    }
    Err(Error::NoConvergence {
        what: format!("deterministic Riccati horizon extension (eta = {eta})"),
        limit: HORIZON_EXT_CAP,
        last_change,
    })
}

/// Synthesize a mean-square stabilizer for dX = (AX + Bu)dt + (CX + Du)dW
/// by gain iteration on the Riccati equation with weights (M, N). The pair
/// [A, C | detect_E] must not be provably undetectable; callers pass
/// detect_E with M = detect_E' detect_E (typically the PSD square root).
#[allow(clippy::too_many_arguments)]
pub fn synthesize_stabilizer(
    period: f64,
    steps: usize,
    a: Coeff,
    c: Coeff,
    b: Coeff,
    d: Coeff,
    m_weight: Coeff,
    n_weight: Coeff,
    detect_e: Coeff,
    theta0: Option<&PeriodicTable>,
) -> Result<StabilizerSynthesis> {
    let detectability = detectability_test(period, steps, a, c, detect_e)?;
    if detectability.detectable == Some(false) {
        return Err(Error::AssumptionViolation {
            which: "exact detectability".into(),
            detail: detectability.evidence.clone(),
        });
    }
    let theta_init = match theta0 {
        Some(t) => t.clone(),
        None => initial_stabilizer(period, steps, a, c, b, d, m_weight, n_weight)?,
    };
    let zero_cross = |s: Stage| DMatrix::zeros(b(s).ncols(), a(s).nrows());
    let (p, theta, iterations, witness) = kleinman_with_cross(
        period,
        steps,
        a,
        c,
        b,
        d,
        m_weight,
        &zero_cross,
        n_weight,
        &theta_init,
    )?;
    // postcondition: the synthesized gain stabilizes
    let a_cl = |s: Stage| a(s) + b(s) * theta.at(s);
    let c_cl = |s: Stage| c(s) + d(s) * theta.at(s);
    let v = is_ms_stable(period, steps, &a_cl, &c_cl)?;
    if !v.stable {
        return Err(Error::Internal(format!(
            "synthesized gain fails to stabilize (spectral radius {:.9})",
            v.spectral_radius
        )));
    }
    Ok(StabilizerSynthesis {
        p,
        theta,
        iterations,
        monotonicity_witness: witness,
        detectability,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Harmonic, MatrixBuilder, PeriodicMatrixFn};
    use crate::numerics::fd_derivative_periodic;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const STEPS: usize = 256;

    fn ct(v: f64) -> impl Fn(Stage) -> DMatrix<f64> {
        move |_| DMatrix::from_element(1, 1, v)
    }

    fn cm(m: DMatrix<f64>) -> impl Fn(Stage) -> DMatrix<f64> {
        move |_| m.clone()
    }

    #[test]
    fn monodromy_scalar_decay() {
        let mono = moment_monodromy(1.0, STEPS, &ct(-1.0), &ct(0.0)).unwrap();
        assert_abs_diff_eq!(mono[(0, 0)], (-2.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn monodromy_scalar_with_noise() {
        // dm/dt = (2a + c^2) m = 2m
        let mono = moment_monodromy(1.0, STEPS, &ct(-1.0), &ct(2.0)).unwrap();
        assert_abs_diff_eq!(mono[(0, 0)], 2.0f64.exp(), epsilon = 1e-7);
    }

    #[test]
    fn monodromy_frozen_flow_is_identity() {
        let z = DMatrix::zeros(2, 2);
        let mono = moment_monodromy(1.0, STEPS, &cm(z.clone()), &cm(z)).unwrap();
        assert!((mono - DMatrix::<f64>::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn monodromy_sine_modulated_drift() {
        // a(t) = -1 + 0.9 sin(2πt): the sine integrates to zero over one
        // period, so the scalar monodromy is exp(∫2a) = e^{-2}.
        let f = PeriodicMatrixFn::new(
            "A",
            1,
            1,
            1.0,
            STEPS,
            MatrixBuilder::fourier(
                DMatrix::from_element(1, 1, -1.0),
                vec![Harmonic {
                    k: 1,
                    cos: DMatrix::zeros(1, 1),
                    sin: DMatrix::from_element(1, 1, 0.9),
                }],
            ),
        )
        .unwrap();
        let mono = moment_monodromy(1.0, STEPS, &|s| f.at(s).clone(), &ct(0.0)).unwrap();
        assert_abs_diff_eq!(mono[(0, 0)], (-2.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn stability_verdicts() {
        let v = is_ms_stable(1.0, STEPS, &ct(-1.0), &ct(0.0)).unwrap();
        assert!(v.stable);
        assert_abs_diff_eq!(v.spectral_radius, (-2.0f64).exp(), epsilon = 1e-9);
        assert_abs_diff_eq!(v.decay_rate_estimate.unwrap(), 2.0, epsilon = 1e-8);

        let v = is_ms_stable(1.0, STEPS, &ct(0.1), &ct(0.0)).unwrap();
        assert!(!v.stable);
        assert_abs_diff_eq!(v.spectral_radius, 0.2f64.exp(), epsilon = 1e-9);
        assert!(v.decay_rate_estimate.is_none());
    }

    #[test]
    fn lyapunov_scalar_balances() {
        // 2aP + Λ = 0 -> P = 0.5
        let p = solve_periodic_lyapunov(1.0, STEPS, &ct(-1.0), &ct(0.0), &ct(1.0)).unwrap();
        for j in 0..STEPS as i64 {
            assert_abs_diff_eq!(p.node(j)[(0, 0)], 0.5, epsilon = 1e-8);
            assert_abs_diff_eq!(p.mid(j)[(0, 0)], 0.5, epsilon = 1e-8);
        }
        // (2a + c^2)P + Λ = -P + 1 = 0
        let p = solve_periodic_lyapunov(1.0, STEPS, &ct(-1.0), &ct(1.0), &ct(1.0)).unwrap();
        assert_abs_diff_eq!(p.node(17)[(0, 0)], 1.0, epsilon = 1e-8);
        // zero source -> zero solution
        let p = solve_periodic_lyapunov(1.0, STEPS, &ct(-1.0), &ct(0.5), &ct(0.0)).unwrap();
        assert_eq!(p.sup_norm(), 0.0);
    }

    #[test]
    fn lyapunov_refuses_unstable_pair() {
        match solve_periodic_lyapunov(1.0, STEPS, &ct(1.0), &ct(0.0), &ct(1.0)) {
            Err(Error::NotStable { rho }) => assert!(rho > 1.0),
            other => panic!("expected stability refusal, got {other:?}"),
        }
    }

    #[test]
    fn lyapunov_monodromy_variant_agrees_and_extends() {
        let sweep = solve_periodic_lyapunov(1.0, STEPS, &ct(-1.0), &ct(1.0), &ct(1.0)).unwrap();
        let fixed =
            solve_periodic_lyapunov_monodromy(1.0, STEPS, &ct(-1.0), &ct(1.0), &ct(1.0)).unwrap();
        assert!(sweep.sup_diff(&fixed) < 1e-9);

        // unstable pair still has a (here negative) periodic solution:
        // 2P + 1 = 0 -> P = -0.5
        let p = solve_periodic_lyapunov_monodromy(1.0, STEPS, &ct(1.0), &ct(0.0), &ct(1.0)).unwrap();
        assert_abs_diff_eq!(p.node(0)[(0, 0)], -0.5, epsilon = 1e-8);
    }

    #[test]
    fn lyapunov_roundtrip_residual_and_positivity() {
        let a = crate::model::mat(&[&[-1.0, 0.3], &[0.0, -1.5]]);
        let c = crate::model::mat(&[&[0.2, 0.0], &[0.1, -0.2]]);
        let lam = crate::model::mat(&[&[1.0, 0.2], &[0.2, 2.0]]);
        let af = cm(a.clone());
        let cf = cm(c.clone());
        let lf = cm(lam.clone());
        let p = solve_periodic_lyapunov(1.0, STEPS, &af, &cf, &lf).unwrap();
        assert!(p.min_eigenvalue_nodes() > 0.0, "P should be uniformly PD");
        let h = p.h();
        let dp = fd_derivative_periodic(p.nodes(), h);
        let mut worst: f64 = 0.0;
        for (j, d) in dp.iter().enumerate() {
            let pj = p.node(j as i64);
            let res = d + pj * &a + a.transpose() * pj + c.transpose() * pj * &c + &lam;
            worst = worst.max(res.norm());
        }
        assert!(worst < 1e-7, "equation residual {worst}");
    }

    #[test]
    fn detectability_full_rank_branch() {
        let a = cm(crate::model::mat(&[&[0.5, 0.0], &[0.0, -1.0]]));
        let c = cm(DMatrix::zeros(2, 2));
        let e = cm(DMatrix::<f64>::identity(2, 2));
        let v = detectability_test(1.0, 64, &a, &c, &e).unwrap();
        assert_eq!(v.method, DetectabilityMethod::FullRankE);
        assert_eq!(v.detectable, Some(true));
        assert!(v.min_sigma_n > 0.9);
    }

    #[test]
    fn detectability_stable_branch() {
        let e = cm(DMatrix::zeros(1, 1));
        let v = detectability_test(1.0, 64, &ct(-1.0), &ct(0.0), &e).unwrap();
        assert_eq!(v.method, DetectabilityMethod::StableSystem);
        assert_eq!(v.detectable, Some(true));
    }

    #[test]
    fn detectability_negative_case() {
        // unstable and completely unobserved
        let e = cm(DMatrix::zeros(1, 1));
        let v = detectability_test(1.0, 64, &ct(1.0), &ct(0.0), &e).unwrap();
        assert_eq!(v.method, DetectabilityMethod::GramianHeuristic);
        assert_eq!(v.detectable, Some(false));
    }

    #[test]
    fn detectability_inconclusive_case() {
        // observes only the stable component of an unstable system
        let a = cm(crate::model::mat(&[&[1.0, 0.0], &[0.0, -1.0]]));
        let c = cm(DMatrix::zeros(2, 2));
        let e = cm(crate::model::mat(&[&[0.0, 1.0]]));
        let v = detectability_test(1.0, 64, &a, &c, &e).unwrap();
        assert_eq!(v.method, DetectabilityMethod::GramianHeuristic);
        assert_eq!(v.detectable, None);
    }

    #[test]
    fn stabilizer_scalar_stable_open_loop() {
        let syn = synthesize_stabilizer(
            1.0,
            STEPS,
            &ct(-1.0),
            &ct(0.0),
            &ct(1.0),
            &ct(0.0),
            &ct(1.0),
            &ct(1.0),
            &ct(1.0),
            None,
        )
        .unwrap();
        let root2 = 2.0f64.sqrt();
        for j in 0..STEPS as i64 {
            assert_abs_diff_eq!(syn.p.node(j)[(0, 0)], root2 - 1.0, epsilon = 1e-8);
            assert_abs_diff_eq!(syn.theta.node(j)[(0, 0)], 1.0 - root2, epsilon = 1e-8);
        }
        assert!(syn.monotonicity_witness >= -1e-8);
    }

    #[test]
    fn stabilizer_scalar_unstable_needs_ladder() {
        // 2P + 1 - P^2 = 0 -> P = 1 + √2; the seed passes through the
        // inflated deterministic solve first
        let syn = synthesize_stabilizer(
            1.0,
            STEPS,
            &ct(1.0),
            &ct(0.0),
            &ct(1.0),
            &ct(0.0),
            &ct(1.0),
            &ct(1.0),
            &ct(1.0),
            None,
        )
        .unwrap();
        let root2 = 2.0f64.sqrt();
        assert_abs_diff_eq!(syn.p.node(0)[(0, 0)], 1.0 + root2, epsilon = 1e-8);
        assert_abs_diff_eq!(syn.theta.node(0)[(0, 0)], -(1.0 + root2), epsilon = 1e-8);
        assert!(syn.monotonicity_witness >= -1e-8);
    }

    #[test]
    fn stabilizer_zero_control_matrix() {
        let syn = synthesize_stabilizer(
            1.0,
            STEPS,
            &ct(-1.0),
            &ct(0.0),
            &ct(0.0),
            &ct(0.0),
            &ct(1.0),
            &ct(1.0),
            &ct(1.0),
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(syn.p.node(0)[(0, 0)], 0.5, epsilon = 1e-8);
        assert_eq!(syn.theta.sup_norm(), 0.0);
    }

    #[test]
    fn stabilizer_with_control_noise() {
        // P solves -2P + 1 - P^2/(1 + P) = 0, i.e. 3P^2 + P - 1 = 0
        let syn = synthesize_stabilizer(
            1.0,
            STEPS,
            &ct(-1.0),
            &ct(0.0),
            &ct(1.0),
            &ct(1.0),
            &ct(1.0),
            &ct(1.0),
            &ct(1.0),
            None,
        )
        .unwrap();
        let p_star = (13.0f64.sqrt() - 1.0) / 6.0;
        assert_abs_diff_eq!(syn.p.node(11)[(0, 0)], p_star, epsilon = 1e-8);
        assert_abs_diff_eq!(
            syn.theta.node(11)[(0, 0)],
            -p_star / (1.0 + p_star),
            epsilon = 1e-8
        );
    }

    #[test]
    fn stabilizer_reports_not_stabilizable() {
        let res = synthesize_stabilizer(
            1.0,
            64,
            &ct(1.0),
            &ct(0.0),
            &ct(0.0),
            &ct(0.0),
            &ct(1.0),
            &ct(1.0),
            &ct(1.0),
            None,
        );
        assert!(matches!(res, Err(Error::NotStabilizable(_))), "{res:?}");
    }

    #[test]
    fn stabilizer_refuses_provably_undetectable_pair() {
        let res = synthesize_stabilizer(
            1.0,
            64,
            &ct(1.0),
            &ct(0.0),
            &ct(1.0),
            &ct(0.0),
            &ct(0.0),
            &ct(1.0),
            &ct(0.0),
            None,
        );
        assert!(
            matches!(res, Err(Error::AssumptionViolation { .. })),
            "{res:?}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn monodromy_preserves_psd(
            seed_a in proptest::collection::vec(-1.2..1.2f64, 9),
            seed_c in proptest::collection::vec(-0.8..0.8f64, 9),
            seed_g in proptest::collection::vec(-1.0..1.0f64, 9),
            n in 1usize..=3,
        ) {
            let a = DMatrix::from_fn(n, n, |i, j| seed_a[i * 3 + j]);
            let c = DMatrix::from_fn(n, n, |i, j| seed_c[i * 3 + j]);
            let g = DMatrix::from_fn(n, n, |i, j| seed_g[i * 3 + j]);
            let m0 = &g * g.transpose();
            let mono = moment_monodromy(1.0, 64, &cm(a), &cm(c)).unwrap();
            let m1 = smat(&(mono * svec(&m0)), n);
            let floor = -1e-8 * (1.0 + m1.norm());
            prop_assert!(min_eigenvalue(&m1) >= floor,
                "PSD not preserved: min eig {} (floor {})", min_eigenvalue(&m1), floor);
        }
    }
}
