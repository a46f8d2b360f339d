// Shared helpers for the integration suites: bundled problem loading and a
// seeded generator of small random periodic problems whose weight blocks are
// Schur-safe by construction.
#![allow(dead_code)]

use std::path::PathBuf;

use mflq_core::model::{Harmonic, MatrixBuilder, ProblemData};
use mflq_core::stability::is_ms_stable;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn problems_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../problems")
}

pub fn load_problem(name: &str) -> ProblemData {
    let path = problems_dir().join(name);
    ProblemData::from_file(&path)
        .unwrap_or_else(|e| panic!("loading {}: {e}", path.display()))
}

pub fn scalar_benchmark() -> ProblemData {
    load_problem("scalar_benchmark.json")
}

pub fn scalar_offsets_benchmark() -> ProblemData {
    load_problem("scalar_benchmark_offsets.json")
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-amp..amp))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Random PSD matrix with spectral scale about `amp`, plus `ridge` * I.
fn rand_spd(rng: &mut ChaCha8Rng, k: usize, amp: f64, ridge: f64) -> DMatrix<f64> {
    let m = rand_mat(rng, k, k, 1.0);
    symmetrize(&(amp / k as f64 * m.transpose() * m)) + DMatrix::identity(k, k) * ridge
}

/// Weight triple (Q, S, R) with R uniformly positive definite and
/// Q - S'R^(-1)S positive definite outright, so the Schur condition holds
/// with margin regardless of how S was drawn.
fn weight_triple(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let r = rand_spd(rng, m, 0.5, 0.6);
    let s = rand_mat(rng, m, n, 0.25);
    let r_inv_s = r.clone().cholesky().expect("R is PD by construction").solve(&s);
    let q = rand_spd(rng, n, 0.5, 0.4) + symmetrize(&(s.transpose() * r_inv_s));
    (symmetrize(&q), s, r)
}

/// Small random periodic problem: n <= 3, m <= 2, sinusoidal dynamics with a
/// strongly negative diagonal drift, weights constant and Schur-safe. The
/// oscillatory and noise amplitudes are shrunk until both moment loops are
/// mean-square stable, so every returned problem passes assumption checks and
/// admits stationary solutions. `with_bars` toggles all mean-field couplings;
/// without them the aggregate data equals the base data.
pub fn random_problem(seed: u64, with_bars: bool) -> ProblemData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3usize);
    let m = rng.random_range(1..=2usize);
    let tau = [0.7, 1.0, 1.3][rng.random_range(0..3usize)];

    // Fixed draws; only the amplitude scale changes between attempts.
    let mut a_mean = rand_mat(&mut rng, n, n, 0.25 / n as f64);
    for i in 0..n {
        a_mean[(i, i)] = -rng.random_range(0.8..1.4);
    }
    let a_cos = rand_mat(&mut rng, n, n, 0.18);
    let a_sin = rand_mat(&mut rng, n, n, 0.18);
    let abar_mean = rand_mat(&mut rng, n, n, 0.08);
    let abar_sin = rand_mat(&mut rng, n, n, 0.05);
    let b_mean = rand_mat(&mut rng, n, m, 1.0);
    let b_cos = rand_mat(&mut rng, n, m, 0.15);
    let bbar_mean = rand_mat(&mut rng, n, m, 0.10);
    let c_mean = rand_mat(&mut rng, n, n, 0.15 / (n as f64).sqrt());
    let c_sin = rand_mat(&mut rng, n, n, 0.10);
    let cbar_mean = rand_mat(&mut rng, n, n, 0.08);
    let d_mean = rand_mat(&mut rng, n, m, 0.10);
    let dbar_mean = rand_mat(&mut rng, n, m, 0.06);

    let (q, s, r) = weight_triple(&mut rng, n, m);
    let (q_hat, s_hat, r_hat) = if with_bars {
        weight_triple(&mut rng, n, m)
    } else {
        (q.clone(), s.clone(), r.clone())
    };

    let b_off_mean = rand_mat(&mut rng, n, 1, 0.3);
    let b_off_sin = rand_mat(&mut rng, n, 1, 0.2);
    let sigma_off = rand_mat(&mut rng, n, 1, 0.2);
    let q_off = rand_mat(&mut rng, n, 1, 0.1);
    let r_off = rand_mat(&mut rng, m, 1, 0.05);

    let mut scale = 1.0;
    for _ in 0..12 {
        let mut builder = ProblemData::builder(n, m, tau)
            .set(
                "A",
                MatrixBuilder::fourier(
                    a_mean.clone(),
                    vec![Harmonic {
                        k: 1,
                        cos: scale * &a_cos,
                        sin: scale * &a_sin,
                    }],
                ),
            )
            .set(
                "B",
                MatrixBuilder::fourier(
                    b_mean.clone(),
                    vec![Harmonic {
                        k: 1,
                        cos: scale * &b_cos,
                        sin: DMatrix::zeros(n, m),
                    }],
                ),
            )
            .set(
                "C",
                MatrixBuilder::fourier(
                    scale * &c_mean,
                    vec![Harmonic {
                        k: 2,
                        cos: DMatrix::zeros(n, n),
                        sin: scale * &c_sin,
                    }],
                ),
            )
            .constant("D", scale * &d_mean)
            .constant("Q", q.clone())
            .constant("S", s.clone())
            .constant("R", r.clone())
            .set(
                "b",
                MatrixBuilder::fourier(
                    b_off_mean.clone(),
                    vec![Harmonic {
                        k: 1,
                        cos: DMatrix::zeros(n, 1),
                        sin: b_off_sin.clone(),
                    }],
                ),
            )
            .constant("sigma", sigma_off.clone())
            .constant("q", q_off.clone())
            .constant("r", r_off.clone());
        if with_bars {
            builder = builder
                .set(
                    "A_bar",
                    MatrixBuilder::fourier(
                        scale * &abar_mean,
                        vec![Harmonic {
                            k: 1,
                            cos: DMatrix::zeros(n, n),
                            sin: scale * &abar_sin,
                        }],
                    ),
                )
                .constant("B_bar", scale * &bbar_mean)
                .constant("C_bar", scale * &cbar_mean)
                .constant("D_bar", scale * &dbar_mean)
                .constant("Q_bar", &q_hat - &q)
                .constant("S_bar", &s_hat - &s)
                .constant("R_bar", &r_hat - &r);
        }
        let pr = builder.build().expect("generated coefficients are well formed");

        let state_ok = {
            let a = |st| pr.A.at(st).clone();
            let c = |st| pr.C.at(st).clone();
            is_ms_stable(pr.tau, pr.steps, &a, &c).expect("monodromy computes").stable
        };
        let mean_ok = {
            let a = |st| pr.A_hat.at(st).clone();
            let c = move |_| DMatrix::<f64>::zeros(n, n);
            is_ms_stable(pr.tau, pr.steps, &a, &c).expect("monodromy computes").stable
        };
        if state_ok && mean_ok {
            let report = mflq_core::model::validate_assumptions(&pr, 1e-9);
            assert!(
                report.a2_ok(),
                "seed {seed}: generated weights fail positivity: {:?}",
                report.failures
            );
            return pr;
        }
        scale *= 0.6;
    }
    panic!("seed {seed}: no stable scaling found in 12 attempts");
}
