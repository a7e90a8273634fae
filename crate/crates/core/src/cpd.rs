//! Canonical polyadic decomposition by alternating least squares, plus
//! Kruskal-rank diagnostics.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::geometry::sample_cn;
use crate::linalg::{
    frob_norm, min_singular_value_normalized, normalize_columns, pinv, solve_hpd, svd_sorted,
    ComplexMatrix,
};
use crate::tensor::{cpd_reconstruct, khatri_rao, FactorSet, Tensor3};

/// Singular-value threshold for the numerical k-rank.
pub const KRANK_TOL: f64 = 1e-8;
const MAX_SUBSETS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum AlsInit {
    /// Projection onto the pilot pseudo-inverse when `T ≥ K`, otherwise `Svd`.
    Auto,
    /// Leading singular vectors of the mode-1/mode-2 unfoldings for `G`/`A`;
    /// `S` starts at the supplied pilot matrix (random if none).
    Svd,
    /// Rank-one split of each row of `S_o† Y_(3)` (requires pilots).
    PilotProjection,
    Random(u64),
    /// Caller-supplied starting factors.
    Given(FactorSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsOptions {
    pub max_iters: usize,
    /// Relative fit-change tolerance.
    pub tol: f64,
    pub init: AlsInit,
    /// Known `T×L` symbol factor used for initialization.
    pub pilots: Option<ComplexMatrix>,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            max_iters: 3000,
            tol: 1e-8,
            init: AlsInit::Auto,
            pilots: None,
        }
    }
}

impl AlsOptions {
    pub fn with_pilots(pilots: &ComplexMatrix) -> Self {
        Self {
            pilots: Some(pilots.clone()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsReport {
    pub iterations: usize,
    /// Final `‖Y − Ŷ‖ / ‖Y‖`.
    pub fit_error: f64,
    pub converged: bool,
    /// A Khatri-Rao normal matrix was singular and needed a ridge.
    pub regularized: bool,
    /// Relative fit error after every sweep (index 0 is the initialization).
    pub history: Vec<f64>,
}

fn relative_fit(y: &Tensor3, f: &FactorSet, ynorm: f64) -> f64 {
    let r = cpd_reconstruct(f);
    y.sub(&r).map(|d| d.norm() / ynorm).unwrap_or(f64::INFINITY)
}

/// `X = argmin ‖Yᵀ − (B ⊙ C) X‖` via the Hadamard Gram `(BᴴB)∘(CᴴC)`;
/// returns the factor `Xᵀ`.
fn ls_update(
    yt: &ComplexMatrix,
    b: &ComplexMatrix,
    c: &ComplexMatrix,
) -> Result<(ComplexMatrix, bool)> {
    let z = khatri_rao(b, c)?;
    let gram = (b.adjoint() * b).component_mul(&(c.adjoint() * c));
    let rhs = z.adjoint() * yt;
    let (x, ridged) = solve_hpd(&gram, &rhs);
    Ok((x.transpose(), ridged))
}

fn leading_vectors(m: &ComplexMatrix, l: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
    let (u, _, _) = svd_sorted(m);
    ComplexMatrix::from_fn(m.nrows(), l, |i, j| {
        if j < u.ncols() {
            u[(i, j)]
        } else {
            sample_cn(rng, 1.0)
        }
    })
}

fn random_factor(rows: usize, l: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, l, |_, _| sample_cn(rng, 1.0))
}

fn initialize(y: &Tensor3, l: usize, opts: &AlsOptions) -> Result<FactorSet> {
    let (p, m, t) = y.dims();
    if let Some(s) = &opts.pilots {
        if s.shape() != (t, l) {
            return Err(dim_err(format!(
                "initial S must be {t}×{l}, got {:?}",
                s.shape()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(match opts.init {
        AlsInit::Random(seed) => seed,
        _ => 0x5eed,
    });
    let init = match (&opts.init, &opts.pilots) {
        (AlsInit::Auto, Some(s)) if t >= l => AlsInit::PilotProjection,
        (AlsInit::Auto, _) => AlsInit::Svd,
        (AlsInit::PilotProjection, None) => {
            return Err(arg_err("pilot-projection initialization needs pilots"));
        }
        (other, _) => other.clone(),
    };
    let f = match init {
        AlsInit::Given(f) => {
            if f.dims() != (p, m, t) || f.rank() != l {
                return Err(dim_err(format!(
                    "initial factors are {:?} with rank {}, expected {:?} with rank {l}",
                    f.dims(),
                    f.rank(),
                    (p, m, t)
                )));
            }
            f
        }
        AlsInit::Random(_) => FactorSet::new(
            random_factor(p, l, &mut rng),
            random_factor(m, l, &mut rng),
            random_factor(t, l, &mut rng),
        )?,
        AlsInit::Svd => {
            let g = leading_vectors(&y.unfold(1)?, l, &mut rng);
            let a = leading_vectors(&y.unfold(2)?, l, &mut rng);
            let s = match &opts.pilots {
                Some(s) => s.clone(),
                None => random_factor(t, l, &mut rng),
            };
            FactorSet::new(g, a, s)?
        }
        AlsInit::PilotProjection => {
            let s = opts.pilots.clone().expect("checked above");
            let x = pinv(&s, 1e-10) * y.unfold(3)?;
            let mut g = ComplexMatrix::zeros(p, l);
            let mut a = ComplexMatrix::zeros(m, l);
            for k in 0..l {
                let blk = ComplexMatrix::from_fn(p, m, |pi, mi| x[(k, pi + p * mi)]);
                let (u, sv, v) = svd_sorted(&blk);
                let root = sv[0].sqrt();
                for pi in 0..p {
                    g[(pi, k)] = u[(pi, 0)] * root;
                }
                for mi in 0..m {
                    a[(mi, k)] = v[(mi, 0)].conj() * root;
                }
            }
            FactorSet::new(g, a, s)?
        }
        AlsInit::Auto => unreachable!(),
    };
    Ok(f)
}

/// Push the column norms of `G` and `A` into `S`.
fn rebalance(f: &mut FactorSet) {
    let (g, gn) = normalize_columns(&f.g);
    let (a, an) = normalize_columns(&f.a);
    if gn.iter().chain(&an).any(|&n| n == 0.0) {
        return;
    }
    f.g = g;
    f.a = a;
    for (j, (x, y)) in gn.iter().zip(&an).enumerate() {
        let mut col = f.s.column_mut(j);
        col *= num_complex::Complex64::from(x * y);
    }
}

/// Rank-`l` CPD of `y` by ALS. `G` and `A` come back with unit-norm columns.
pub fn cpd_als(y: &Tensor3, l: usize, opts: &AlsOptions) -> Result<(FactorSet, AlsReport)> {
    if l == 0 {
        return Err(arg_err("CPD rank must be at least 1"));
    }
    let ynorm = y.norm();
    if !(ynorm > 0.0) {
        return Err(Error::ZeroSignal);
    }
    if !ynorm.is_finite() {
        return Err(Error::NonFinite("observation tensor".into()));
    }
    let y1t = y.unfold(1)?.transpose();
    let y2t = y.unfold(2)?.transpose();
    let y3t = y.unfold(3)?.transpose();

    let mut f = initialize(y, l, opts)?;
    let mut regularized = false;
    let mut history = vec![relative_fit(y, &f, ynorm)];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        iterations += 1;
        let (g, r1) = ls_update(&y1t, &f.s, &f.a)?;
        f.g = g;
        let (a, r2) = ls_update(&y2t, &f.s, &f.g)?;
        f.a = a;
        let (s, r3) = ls_update(&y3t, &f.a, &f.g)?;
        f.s = s;
        regularized |= r1 || r2 || r3;
        rebalance(&mut f);

        let fit = relative_fit(y, &f, ynorm);
        if !fit.is_finite() {
            return Err(Error::NonFinite(format!("ALS fit at sweep {iterations}")));
        }
        let prev = *history.last().expect("nonempty");
        history.push(fit);
        if fit < 1e-12 || (prev - fit).abs() <= opts.tol * prev {
            converged = true;
            break;
        }
    }
    let fit_error = *history.last().expect("nonempty");
    Ok((
        f,
        AlsReport {
            iterations,
            fit_error,
            converged,
            regularized,
            history,
        },
    ))
}

fn column_cosine(a: &ComplexMatrix, i: usize, b: &ComplexMatrix, j: usize) -> f64 {
    let x = a.column(i);
    let y = b.column(j);
    let (nx, ny) = (x.norm(), y.norm());
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    x.dotc(&y).norm() / (nx * ny)
}

/// Worst-case (over true components) best-match triple cosine between an
/// estimated and a true factor set. One for exact recovery up to scaling and
/// permutation.
pub fn congruence(est: &FactorSet, truth: &FactorSet) -> f64 {
    (0..truth.rank())
        .map(|l| {
            (0..est.rank())
                .map(|j| {
                    column_cosine(&truth.g, l, &est.g, j)
                        * column_cosine(&truth.a, l, &est.a, j)
                        * column_cosine(&truth.s, l, &est.s, j)
                })
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// For every true component, the estimated column with the highest triple
/// cosine.
pub fn match_components(est: &FactorSet, truth: &FactorSet) -> Vec<usize> {
    (0..truth.rank())
        .map(|l| {
            (0..est.rank())
                .map(|j| {
                    let c = column_cosine(&truth.g, l, &est.g, j)
                        * column_cosine(&truth.a, l, &est.a, j)
                        * column_cosine(&truth.s, l, &est.s, j);
                    (j, c)
                })
                .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best })
                .0
        })
        .collect()
}

fn subset_independent(m: &ComplexMatrix, cols: &[usize], tol: f64) -> bool {
    let sub = m.select_columns(cols);
    min_singular_value_normalized(&sub) > tol
}

/// Numerical Kruskal rank. Exhaustive over column subsets while their count
/// stays small, otherwise a deterministic random sample of subsets.
pub fn kruskal_rank(m: &ComplexMatrix, tol: f64) -> usize {
    let n = m.ncols();
    let max_k = n.min(m.nrows());
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b72);
    for k in 1..=max_k {
        let all_ok = if binomial(n, k) <= MAX_SUBSETS as f64 {
            Combinations::new(n, k).all(|c| subset_independent(m, &c, tol))
        } else {
            (0..MAX_SUBSETS).all(|_| {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                subset_independent(m, &c, tol)
            })
        };
        if !all_ok {
            return k - 1;
        }
    }
    max_k
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Lexicographic `k`-subsets of `0..n`.
pub(crate) struct Combinations {
    idx: Vec<usize>,
    n: usize,
    done: bool,
}

impl Combinations {
    pub(crate) fn new(n: usize, k: usize) -> Self {
        Self {
            idx: (0..k).collect(),
            n,
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for j in (i + 1)..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KruskalReport {
    pub k_g: usize,
    pub k_a: usize,
    pub k_s: usize,
    /// `k_G + k_A + k_S ≥ 2L + 2`.
    pub satisfied: bool,
}

pub fn kruskal_check(f: &FactorSet) -> KruskalReport {
    let k_g = kruskal_rank(&f.g, KRANK_TOL);
    let k_a = kruskal_rank(&f.a, KRANK_TOL);
    let k_s = kruskal_rank(&f.s, KRANK_TOL);
    KruskalReport {
        k_g,
        k_a,
        k_s,
        satisfied: k_g + k_a + k_s >= 2 * f.rank() + 2,
    }
}

/// Relative reconstruction error `‖Y − [[G, A, S]]‖ / ‖Y‖`.
pub fn reconstruction_error(y: &Tensor3, f: &FactorSet) -> Result<f64> {
    let d = y.sub(&cpd_reconstruct(f))?;
    Ok(d.norm() / y.norm())
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn relative_error(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    frob_norm(&(a - b)) / frob_norm(b)
}
