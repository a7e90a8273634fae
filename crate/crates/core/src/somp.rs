//! Compressed-sensing baseline: polar-domain dictionary with simultaneous
//! orthogonal matching pursuit on the mode-1 unfolding.
//!
//! `Y_(1)ᵀ = Φ X + N` with `Φ = S ⊗ (Wᴴ B̄)`; atom `j = k·Q + q` pairs user
//! `k`'s pilot with dictionary column `q`.

use num_complex::Complex64;

use crate::error::{arg_err, dim_err, Result};
use crate::extract::PolarCodebook;
use crate::geometry::steering_vector;
use crate::linalg::{c64, numerical_rank, pinv, ComplexMatrix, ComplexVector};
use crate::pilots::PilotMatrix;
use crate::tensor::Tensor3;

/// Multiple-measurement-vector problem for one received tensor.
#[derive(Debug, Clone)]
pub struct MmvProblem<'a> {
    pub book: &'a PolarCodebook,
    /// Pilot matrix `S` (`T×K`).
    pub s: ComplexMatrix,
    /// Measurements `Y_(1)ᵀ` (`MT×P`).
    pub y: ComplexMatrix,
    dict: faer::Mat<Complex64>,
    /// `‖φ_j‖`, used to normalize correlations.
    norms: Vec<f64>,
}

impl<'a> MmvProblem<'a> {
    pub fn n_atoms(&self) -> usize {
        self.s.ncols() * self.book.len()
    }

    pub fn n_measurements(&self) -> usize {
        self.y.nrows()
    }

    pub fn column_norm(&self, j: usize) -> f64 {
        self.norms[j]
    }

    /// `(user, codebook index)` of atom `j`.
    pub fn atom(&self, j: usize) -> (usize, usize) {
        (j / self.book.len(), j % self.book.len())
    }

    /// `φ_j = s_k ⊗ Wᴴ b̄_q` (not normalized).
    pub fn sensing_column(&self, j: usize) -> ComplexVector {
        let (k, q) = self.atom(j);
        let c = self.book.projected_atoms().column(q);
        let m = c.nrows();
        ComplexVector::from_fn(self.s.nrows() * m, |r, _| self.s[(r / m, k)] * c[r % m])
    }

    /// Full `Φ` (`MT × KQ`); intended for small problems.
    pub fn sensing_matrix(&self) -> ComplexMatrix {
        let mut phi = ComplexMatrix::zeros(self.n_measurements(), self.n_atoms());
        for j in 0..self.n_atoms() {
            phi.set_column(j, &self.sensing_column(j));
        }
        phi
    }

    fn support_matrix(&self, support: &[usize]) -> ComplexMatrix {
        let mut phi = ComplexMatrix::zeros(self.n_measurements(), support.len());
        for (i, &j) in support.iter().enumerate() {
            phi.set_column(i, &self.sensing_column(j));
        }
        phi
    }

    /// `‖φ_jᴴ R‖₂ / ‖φ_j‖` for every atom, summed over the `P` columns of `R`.
    /// Uses `φ_{kq}ᴴ r = c_qᴴ R_p conj(s_k)` with `R_p` the `M×T` reshaping.
    pub fn correlations(&self, r: &ComplexMatrix) -> Vec<f64> {
        let (t, k) = self.s.shape();
        let m = self.dict.nrows();
        let p = r.ncols();
        let q = self.book.len();
        let mut z = faer::Mat::<Complex64>::zeros(m, k * p);
        for pi in 0..p {
            for ki in 0..k {
                for mi in 0..m {
                    let mut acc = c64(0.0, 0.0);
                    for ti in 0..t {
                        acc += r[(mi + m * ti, pi)] * self.s[(ti, ki)].conj();
                    }
                    z[(mi, ki + k * pi)] = acc;
                }
            }
        }
        let mut corr = faer::Mat::<Complex64>::zeros(q, k * p);
        faer::linalg::matmul::matmul(
            corr.as_mut(),
            faer::Accum::Replace,
            self.dict.as_ref().adjoint(),
            z.as_ref(),
            c64(1.0, 0.0),
            faer::Par::Seq,
        );
        let mut out = vec![0.0; k * q];
        for ki in 0..k {
            for qi in 0..q {
                let e: f64 = (0..p).map(|pi| corr[(qi, ki + k * pi)].norm_sqr()).sum();
                let j = ki * q + qi;
                out[j] = if self.norms[j] > 0.0 {
                    e.sqrt() / self.norms[j]
                } else {
                    0.0
                };
            }
        }
        out
    }

    /// Least-squares coefficients on `support` and the residual `Y − Φ_S X_S`.
    pub fn refit(&self, support: &[usize]) -> (ComplexMatrix, ComplexMatrix) {
        let phi = self.support_matrix(support);
        let x = pinv(&phi, 1e-12) * &self.y;
        let resid = &self.y - &phi * &x;
        (x, resid)
    }
}

/// `Φ` and `Y_(1)ᵀ` for a received tensor.
pub fn build_mmv<'a>(
    y: &Tensor3,
    pilots: &PilotMatrix,
    book: &'a PolarCodebook,
) -> Result<MmvProblem<'a>> {
    let (p, m, t) = y.dims();
    let cfg = &book.cfg;
    if (p, m, t) != (cfg.n_subcarriers, cfg.n_rf, cfg.n_symbols) {
        return Err(dim_err(format!(
            "tensor {:?} does not match the codebook configuration",
            y.dims()
        )));
    }
    if pilots.n_symbols() != t {
        return Err(dim_err("pilot length must equal T"));
    }
    let s = pilots.matrix().clone();
    let atoms = book.projected_atoms();
    let dict = faer::Mat::from_fn(atoms.nrows(), atoms.ncols(), |i, j| atoms[(i, j)]);
    let q = book.len();
    let mut norms = Vec::with_capacity(s.ncols() * q);
    for k in 0..s.ncols() {
        let sn = s.column(k).norm();
        norms.extend(book.atom_norms().iter().map(|c| sn * c));
    }
    Ok(MmvProblem {
        book,
        s,
        y: y.unfold(1)?.transpose(),
        dict,
        norms,
    })
}

/// Output of [`somp`].
#[derive(Debug, Clone)]
pub struct SompResult {
    /// Selected atoms in selection order.
    pub support: Vec<usize>,
    /// LS coefficients (`|support| × P`).
    pub coefficients: ComplexMatrix,
    /// `‖R‖_F` after each refit.
    pub residual_norms: Vec<f64>,
    /// Set when the budget exceeded the measurement rank.
    pub stopped_early: bool,
}

/// Simultaneous OMP with an `L`-atom budget.
pub fn somp(problem: &MmvProblem<'_>, budget: usize) -> Result<SompResult> {
    if budget == 0 {
        return Err(arg_err("sparsity budget must be at least 1"));
    }
    let rank = numerical_rank(&problem.y, 1e-12).max(1);
    let limit = budget.min(problem.n_measurements());
    let mut support: Vec<usize> = Vec::with_capacity(limit);
    let mut residual = problem.y.clone();
    let mut residual_norms = Vec::with_capacity(limit);
    let mut coefficients = ComplexMatrix::zeros(0, problem.y.ncols());
    let mut stopped_early = budget > limit;
    for _ in 0..limit {
        let corr = problem.correlations(&residual);
        let best = corr
            .iter()
            .enumerate()
            .filter(|(j, _)| !support.contains(j))
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(j, _)| j);
        let Some(j) = best else { break };
        if corr[j] == 0.0 {
            stopped_early = true;
            break;
        }
        support.push(j);
        let (x, r) = problem.refit(&support);
        coefficients = x;
        residual = r;
        residual_norms.push(residual.norm());
        if support.len() >= rank && residual.norm() <= 1e-14 * problem.y.norm() {
            stopped_early = support.len() < budget;
            break;
        }
    }
    Ok(SompResult {
        support,
        coefficients,
        residual_norms,
        stopped_early,
    })
}

/// Channels `ĥ_{p,k} = Σ_q X[kQ+q, p] b̄_q` from the selected atoms.
pub fn somp_channels(problem: &MmvProblem<'_>, result: &SompResult) -> Vec<Vec<Vec<Complex64>>> {
    let cfg = &problem.book.cfg;
    let k = problem.s.ncols();
    let mut h = vec![vec![vec![c64(0.0, 0.0); cfg.n_antennas]; cfg.n_subcarriers]; k];
    let lambda = cfg.wavelength();
    for (i, &j) in result.support.iter().enumerate() {
        let (user, q) = problem.atom(j);
        let (th, r) = problem.book.position(q);
        let b = steering_vector(th, r, cfg, lambda);
        for (p, hp) in h[user].iter_mut().enumerate() {
            let x = result.coefficients[(i, p)];
            for (e, z) in hp.iter_mut().zip(&b) {
                *e += x * z;
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{nmse, SearchGrids};
    use crate::geometry::{delay_response, PathParams, SystemConfig};
    use crate::pilots::{design_pilots, random_combiner};
    use crate::signal::{add_noise, synthesize, Scenario};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, k: usize) -> (SystemConfig, PolarCodebook, PilotMatrix) {
        let cfg = SystemConfig::new(32, 8, 16, 4, k, 100e9, 1e8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comb = random_combiner(32, 8, &mut rng).unwrap();
        let grids = SearchGrids {
            n_angle: 64,
            n_range: 8,
            ..SearchGrids::for_config(&cfg, 80.0, 2e-9)
        };
        let book = PolarCodebook::new(&cfg, &grids, &comb).unwrap();
        let pilots = design_pilots(4, k, &mut rng).unwrap();
        (cfg, book, pilots)
    }

    fn on_grid(
        cfg: &SystemConfig,
        book: &PolarCodebook,
        pilots: &PilotMatrix,
        atoms: &[(usize, usize)],
    ) -> Scenario {
        let mut paths = vec![Vec::new(); cfg.n_users];
        for (i, &(user, q)) in atoms.iter().enumerate() {
            let (angle, range) = book.position(q);
            let gain = c64(1.0 + i as f64, -0.5 * i as f64);
            paths[user].push(PathParams {
                user,
                gain,
                delay: 5e-8 + 3e-8 * i as f64,
                angle,
                range,
            });
        }
        Scenario::new(*cfg, paths, pilots.clone(), Combiner2::of(book)).unwrap()
    }

    struct Combiner2;
    impl Combiner2 {
        fn of(book: &PolarCodebook) -> crate::pilots::Combiner {
            crate::pilots::Combiner::from_matrix(book.combiner().clone()).unwrap()
        }
    }

    #[test]
    fn dimensions_follow_kronecker_structure() {
        let (_, book, pilots) = setup(0, 3);
        let y = Tensor3::zeros(16, 8, 4);
        let prob = build_mmv(&y, &pilots, &book).unwrap();
        assert_eq!(prob.n_measurements(), 4 * 8);
        assert_eq!(prob.n_atoms(), 3 * book.len());
        let phi = prob.sensing_matrix();
        assert_eq!(phi.shape(), (32, 3 * 512));
        let j = book.len() + 17;
        assert!((phi.column(j).norm() - prob.column_norm(j)).abs() < 1e-12);
    }

    #[test]
    fn correlations_match_explicit_products() {
        let (_, book, pilots) = setup(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Tensor3::from_fn((16, 8, 4), |_, _, _| {
            c64(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let prob = build_mmv(&y, &pilots, &book).unwrap();
        let fast = prob.correlations(&prob.y);
        let phi = prob.sensing_matrix();
        let slow = phi.adjoint() * &prob.y;
        for j in [0, 5, 600, 1023] {
            let want = slow.row(j).norm() / prob.column_norm(j);
            assert!((fast[j] - want).abs() < 1e-10 * want.max(1e-300));
        }
    }

    #[test]
    fn single_atom_signal_is_rank_one() {
        let (cfg, book, pilots) = setup(2, 1);
        let sc = on_grid(&cfg, &book, &pilots, &[(0, 200)]);
        let prob = build_mmv(&synthesize(&sc), &pilots, &book).unwrap();
        assert_eq!(numerical_rank(&prob.y, 1e-10), 1);
        let phi = prob.sensing_column(200);
        let g = delay_response(sc.paths[0][0].delay, &cfg);
        let want = ComplexMatrix::from_fn(32, 16, |r, p| phi[r] * g[p] * sc.paths[0][0].gain);
        assert!((&prob.y - want).norm() < 1e-12 * prob.y.norm());
        let res = somp(&prob, 1).unwrap();
        assert_eq!(res.support, vec![200]);
    }

    #[test]
    fn true_support_least_squares_is_exact() {
        let (cfg, book, pilots) = setup(3, 2);
        let atoms = [(0, 40), (1, 300), (1, 77)];
        let sc = on_grid(&cfg, &book, &pilots, &atoms);
        let prob = build_mmv(&synthesize(&sc), &pilots, &book).unwrap();
        let support: Vec<usize> = atoms.iter().map(|&(k, q)| k * book.len() + q).collect();
        let (_, r) = prob.refit(&support);
        assert!(r.norm() < 1e-10 * prob.y.norm());
    }

    #[test]
    fn noiseless_on_grid_recovery_and_channels() {
        let (cfg, book, pilots) = setup(4, 2);
        let atoms = [(0, 40), (1, 300)];
        let sc = on_grid(&cfg, &book, &pilots, &atoms);
        let prob = build_mmv(&synthesize(&sc), &pilots, &book).unwrap();
        let res = somp(&prob, 2).unwrap();
        let mut got = res.support.clone();
        got.sort();
        assert_eq!(got, vec![40, book.len() + 300]);
        let h = somp_channels(&prob, &res);
        assert!(nmse(&h, &sc.channels()).unwrap() < 1e-12);
    }

    #[test]
    fn residual_decreases_and_is_orthogonal() {
        let (cfg, book, pilots) = setup(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let paths = (0..3)
            .map(|k| {
                vec![PathParams {
                    user: k,
                    gain: c64(1.0, 0.3),
                    delay: rng.random_range(1e-8..2e-7),
                    angle: rng.random_range(-0.9..0.9),
                    range: rng.random_range(20.0..80.0),
                }]
            })
            .collect();
        let sc = Scenario::new(cfg, paths, pilots.clone(), Combiner2::of(&book)).unwrap();
        let (y, _) = add_noise(&synthesize(&sc), 15.0, &mut rng).unwrap();
        let prob = build_mmv(&y, &pilots, &book).unwrap();
        let res = somp(&prob, 8).unwrap();
        for w in res.residual_norms.windows(2) {
            assert!(w[1] < w[0]);
        }
        let mut sorted = res.support.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), res.support.len());
        let (_, r) = prob.refit(&res.support);
        let phi = prob.support_matrix(&res.support);
        let orth = (phi.adjoint() * &r).norm() / (phi.norm() * r.norm());
        assert!(orth < 1e-10, "{orth}");
    }

    #[test]
    fn budget_beyond_measurements_stops_early() {
        let (cfg, book, pilots) = setup(6, 1);
        let sc = on_grid(&cfg, &book, &pilots, &[(0, 10)]);
        let prob = build_mmv(&synthesize(&sc), &pilots, &book).unwrap();
        let res = somp(&prob, 100).unwrap();
        assert!(res.stopped_early);
        assert!(somp(&prob, 0).is_err());
    }
}
