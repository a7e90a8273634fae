//! Pilot matrices with low mutual coherence and random phase-only combiners.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{arg_err, Result};
use crate::geometry::sample_cn;
use crate::linalg::{normalize_columns, ComplexMatrix};

const PROJECTION_ITERS: usize = 200;

/// `T×K` pilot matrix `S_o`, unit-norm columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    s: ComplexMatrix,
}

impl PilotMatrix {
    /// Wrap an arbitrary matrix; columns are normalized.
    pub fn from_matrix(s: ComplexMatrix) -> Result<Self> {
        let (s, norms) = normalize_columns(&s);
        if norms.iter().any(|&n| !(n > 0.0)) {
            return Err(arg_err("pilot columns must be nonzero"));
        }
        Ok(Self { s })
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.s
    }

    pub fn n_symbols(&self) -> usize {
        self.s.nrows()
    }

    pub fn n_users(&self) -> usize {
        self.s.ncols()
    }

    /// Largest `|s_iᴴ s_j|` over distinct columns.
    pub fn coherence(&self) -> f64 {
        max_coherence(&self.s)
    }
}

/// `N×M` phase-only combiner `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Combiner {
    w: ComplexMatrix,
}

impl Combiner {
    pub fn from_matrix(w: ComplexMatrix) -> Result<Self> {
        if w.iter().any(|z| (z.norm() - 1.0).abs() > 1e-9) {
            return Err(arg_err("combiner entries must be unit modulus"));
        }
        Ok(Self { w })
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.w
    }

    pub fn n_antennas(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_rf(&self) -> usize {
        self.w.ncols()
    }
}

/// Welch lower bound on the coherence of `K` unit vectors in `C^T`.
pub fn welch_bound(t: usize, k: usize) -> f64 {
    if k <= t || k < 2 {
        return 0.0;
    }
    ((k - t) as f64 / (t as f64 * (k - 1) as f64)).sqrt()
}

pub fn max_coherence(s: &ComplexMatrix) -> f64 {
    let (s, _) = normalize_columns(s);
    let gram = s.adjoint() * &s;
    let mut best: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in (i + 1)..gram.ncols() {
            best = best.max(gram[(i, j)].norm());
        }
    }
    best
}

/// Unitary `T×T` DFT matrix.
pub fn dft_matrix(t: usize) -> ComplexMatrix {
    let scale = 1.0 / (t as f64).sqrt();
    ComplexMatrix::from_fn(t, t, |i, j| {
        Complex64::from_polar(scale, -2.0 * PI * (i * j) as f64 / t as f64)
    })
}

/// Pilot design: orthogonal DFT columns when `T ≥ K`, otherwise an alternating
/// projection towards the Welch bound started from Gaussian columns.
pub fn design_pilots<R: Rng + ?Sized>(t: usize, k: usize, rng: &mut R) -> Result<PilotMatrix> {
    if t < 2 {
        return Err(arg_err(format!("need T >= 2 pilot symbols, got {t}")));
    }
    if k == 0 {
        return Err(arg_err("need at least one user"));
    }
    if t >= k {
        let f = dft_matrix(t);
        return Ok(PilotMatrix {
            s: f.columns(0, k).into_owned(),
        });
    }

    let start = ComplexMatrix::from_fn(t, k, |_, _| sample_cn(rng, 1.0));
    let (mut s, _) = normalize_columns(&start);
    let mu = welch_bound(t, k);
    let mut best = s.clone();
    let mut best_coh = max_coherence(&s);

    for _ in 0..PROJECTION_ITERS {
        let mut gram = s.adjoint() * &s;
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    gram[(i, j)] = Complex64::new(1.0, 0.0);
                } else if gram[(i, j)].norm() > mu {
                    let z = gram[(i, j)];
                    gram[(i, j)] = z * (mu / z.norm());
                }
            }
        }
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        // Rank-T factor: rows are sqrt(λ_i) v_iᴴ for the T largest eigenpairs.
        let next = ComplexMatrix::from_fn(t, k, |i, j| {
            let lam = eig.eigenvalues[order[i]].max(0.0).sqrt();
            eig.eigenvectors[(j, order[i])].conj() * lam
        });
        let (next, norms) = normalize_columns(&next);
        if norms.iter().any(|&n| !(n > 0.0)) {
            break;
        }
        s = next;
        let coh = max_coherence(&s);
        if coh < best_coh {
            best_coh = coh;
            best = s.clone();
        }
    }
    Ok(PilotMatrix { s: best })
}

/// Random phase-only combiner with entries `exp(jΦ)`, `Φ ~ U(0, 2π)`.
pub fn random_combiner<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Combiner> {
    if m == 0 || m > n {
        return Err(arg_err(format!("need 1 <= M <= N, got M={m} N={n}")));
    }
    let w = ComplexMatrix::from_fn(n, m, |_, _| {
        Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI))
    });
    Ok(Combiner { w })
}
