//! Rank-(L_k, L_k, 1) block-term decomposition fitted by Levenberg–Marquardt,
//! with a pilot-projection SVD initialization.
//!
//! The model `Σ_k (G_k A_kᵀ) ∘ s_k` is holomorphic in the factor entries, so
//! the damped normal equations are solved directly in complex form; this is
//! the same linear system as the real-stacked one.

use num_complex::Complex64;

use crate::cpd::{Combinations, KRANK_TOL};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::linalg::{
    c64, frob_norm_sq, min_singular_value_normalized, svd_sorted, ComplexMatrix, ComplexVector,
};
use crate::pilots::PilotMatrix;
use crate::tensor::{FactorSet, Tensor3};

/// One user's block `(G_k A_kᵀ) ∘ s_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BtdBlock {
    /// `P×L_k`.
    pub g: ComplexMatrix,
    /// `M×L_k`.
    pub a: ComplexMatrix,
    /// Length `T`.
    pub s: ComplexVector,
}

impl BtdBlock {
    pub fn rank(&self) -> usize {
        self.g.ncols()
    }

    /// `X_k = G_k A_kᵀ`.
    pub fn matrix(&self) -> ComplexMatrix {
        &self.g * self.a.transpose()
    }

    fn n_params(&self) -> usize {
        (self.g.nrows() + self.a.nrows()) * self.rank() + self.s.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtdModel {
    pub blocks: Vec<BtdBlock>,
}

impl BtdModel {
    pub fn new(blocks: Vec<BtdBlock>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| arg_err("BTD model needs at least one block"))?;
        let (p, m, t) = (first.g.nrows(), first.a.nrows(), first.s.len());
        for (k, b) in blocks.iter().enumerate() {
            if b.g.nrows() != p || b.a.nrows() != m || b.s.len() != t {
                return Err(dim_err(format!("block {k} has inconsistent dimensions")));
            }
            if b.g.ncols() != b.a.ncols() || b.rank() == 0 {
                return Err(dim_err(format!(
                    "block {k}: G and A need the same positive width"
                )));
            }
        }
        Ok(Self { blocks })
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(BtdBlock::rank).collect()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let b = &self.blocks[0];
        (b.g.nrows(), b.a.nrows(), b.s.len())
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(BtdBlock::n_params).sum()
    }

    pub fn reconstruct(&self) -> Tensor3 {
        let (p, m, t) = self.dims();
        let mut y = Tensor3::zeros(p, m, t);
        for b in &self.blocks {
            let x = b.matrix();
            let data = y.data_mut();
            for ti in 0..t {
                let st = b.s[ti];
                for mi in 0..m {
                    for pi in 0..p {
                        data[pi + p * (mi + m * ti)] += x[(pi, mi)] * st;
                    }
                }
            }
        }
        y
    }

    /// Expanded CPD view with `s_k` repeated `L_k` times.
    pub fn to_factor_set(&self) -> FactorSet {
        let g = ComplexMatrix::from_columns(
            &self
                .blocks
                .iter()
                .flat_map(|b| b.g.column_iter().map(|c| c.into_owned()))
                .collect::<Vec<_>>(),
        );
        let a = ComplexMatrix::from_columns(
            &self
                .blocks
                .iter()
                .flat_map(|b| b.a.column_iter().map(|c| c.into_owned()))
                .collect::<Vec<_>>(),
        );
        let s = ComplexMatrix::from_columns(
            &self
                .blocks
                .iter()
                .flat_map(|b| std::iter::repeat_n(b.s.clone(), b.rank()))
                .collect::<Vec<_>>(),
        );
        FactorSet::with_blocks(g, a, s, self.block_sizes()).expect("consistent block model")
    }

    /// Parameter vector: per block `[vec G_k, vec A_k, s_k]`, column-major.
    pub fn to_params(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in &self.blocks {
            out.extend(b.g.iter());
            out.extend(b.a.iter());
            out.extend(b.s.iter());
        }
        out
    }

    /// Model with the same block structure and entries taken from `params`.
    pub fn with_params(&self, params: &[Complex64]) -> Result<Self> {
        if params.len() != self.n_params() {
            return Err(dim_err(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let (p, m, l, t) = (b.g.nrows(), b.a.nrows(), b.rank(), b.s.len());
                let g = ComplexMatrix::from_column_slice(p, l, &params[off..off + p * l]);
                off += p * l;
                let a = ComplexMatrix::from_column_slice(m, l, &params[off..off + m * l]);
                off += m * l;
                let s = ComplexVector::from_column_slice(&params[off..off + t]);
                off += t;
                BtdBlock { g, a, s }
            })
            .collect();
        Ok(Self { blocks })
    }

    fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.blocks.len());
        let mut off = 0;
        for b in &self.blocks {
            offs.push(off);
            off += b.n_params();
        }
        offs
    }
}

/// Residual tensor `μ = Ŷ(m) − Y`.
pub fn residual(y: &Tensor3, model: &BtdModel) -> Result<Tensor3> {
    model.reconstruct().sub(y)
}

/// `Jᴴe` for a tensor `e` of the observation shape.
pub fn apply_jh(model: &BtdModel, e: &Tensor3) -> Vec<Complex64> {
    let (p, m, t) = model.dims();
    let data = e.data();
    let mut out = Vec::with_capacity(model.n_params());
    for b in &model.blocks {
        // E_k = Σ_t conj(s_k[t]) E[:,:,t]
        let mut ek = ComplexMatrix::zeros(p, m);
        for ti in 0..t {
            let w = b.s[ti].conj();
            for mi in 0..m {
                for pi in 0..p {
                    ek[(pi, mi)] += w * data[pi + p * (mi + m * ti)];
                }
            }
        }
        let dg = &ek * b.a.map(|z| z.conj());
        let da = ek.transpose() * b.g.map(|z| z.conj());
        let x = b.matrix();
        out.extend(dg.iter());
        out.extend(da.iter());
        for ti in 0..t {
            let mut acc = c64(0.0, 0.0);
            for mi in 0..m {
                for pi in 0..p {
                    acc += x[(pi, mi)].conj() * data[pi + p * (mi + m * ti)];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// `J v`: directional derivative of the model along `v`.
pub fn apply_j(model: &BtdModel, v: &[Complex64]) -> Result<Tensor3> {
    let dir = model.with_params(v)?;
    let (p, m, t) = model.dims();
    let mut y = Tensor3::zeros(p, m, t);
    for (b, d) in model.blocks.iter().zip(&dir.blocks) {
        let dx = &d.g * b.a.transpose() + &b.g * d.a.transpose();
        let x = b.matrix();
        let data = y.data_mut();
        for ti in 0..t {
            let (st, dst) = (b.s[ti], d.s[ti]);
            for mi in 0..m {
                for pi in 0..p {
                    data[pi + p * (mi + m * ti)] += dx[(pi, mi)] * st + x[(pi, mi)] * dst;
                }
            }
        }
    }
    Ok(y)
}

/// Explicit Jacobian `∂vec(Ŷ)/∂m` (`PMT × n`), for small problems and checks.
pub fn jacobian(model: &BtdModel) -> ComplexMatrix {
    let (p, m, t) = model.dims();
    let n = model.n_params();
    let mut j = ComplexMatrix::zeros(p * m * t, n);
    let idx = |pi: usize, mi: usize, ti: usize| pi + p * (mi + m * ti);
    let mut col = 0;
    for b in &model.blocks {
        let l = b.rank();
        for i in 0..l {
            for pi in 0..p {
                for mi in 0..m {
                    for ti in 0..t {
                        j[(idx(pi, mi, ti), col)] = b.a[(mi, i)] * b.s[ti];
                    }
                }
                col += 1;
            }
        }
        for i in 0..l {
            for mi in 0..m {
                for pi in 0..p {
                    for ti in 0..t {
                        j[(idx(pi, mi, ti), col)] = b.g[(pi, i)] * b.s[ti];
                    }
                }
                col += 1;
            }
        }
        let x = b.matrix();
        for ti in 0..t {
            for mi in 0..m {
                for pi in 0..p {
                    j[(idx(pi, mi, ti), col)] = x[(pi, mi)];
                }
            }
            col += 1;
        }
    }
    j
}

/// Closed-form Gauss–Newton matrix `JᴴJ`, assembled block by block without
/// forming `J`.
pub fn gram_matrix(model: &BtdModel) -> ComplexMatrix {
    let (p, m, t) = model.dims();
    let n = model.n_params();
    let offs = model.offsets();
    let xs: Vec<ComplexMatrix> = model.blocks.iter().map(BtdBlock::matrix).collect();
    let mut h = ComplexMatrix::zeros(n, n);

    for (k, bk) in model.blocks.iter().enumerate() {
        let lk = bk.rank();
        let gk0 = offs[k];
        let ak0 = gk0 + p * lk;
        let sk0 = ak0 + m * lk;
        let ak_conj = bk.a.map(|z| z.conj());
        let gk_adj = bk.g.adjoint();
        for (j, bj) in model.blocks.iter().enumerate() {
            let lj = bj.rank();
            let gj0 = offs[j];
            let aj0 = gj0 + p * lj;
            let sj0 = aj0 + m * lj;
            let ss = bk.s.dotc(&bj.s);
            let aa = bk.a.adjoint() * &bj.a;
            let gg = &gk_adj * &bj.g;
            let xj = &xs[j];
            let xj_ak = xj * &ak_conj; // P×L_k
            let gk_xj = &gk_adj * xj; // L_k×M
            let xk_conj = xs[k].map(|z| z.conj());
            let xk_aj = &xk_conj * &bj.a; // P×L_j: Σ_m conj(X_k[p,m]) A_j[m,i']
            let gj_xk = bj.g.transpose() * &xk_conj; // L_j×M: Σ_p G_j[p,i'] conj(X_k[p,m])

            for i in 0..lk {
                for i2 in 0..lj {
                    let vg = aa[(i, i2)] * ss;
                    let va = gg[(i, i2)] * ss;
                    for pi in 0..p {
                        h[(gk0 + pi + p * i, gj0 + pi + p * i2)] = vg;
                    }
                    for mi in 0..m {
                        h[(ak0 + mi + m * i, aj0 + mi + m * i2)] = va;
                    }
                    // (G_k, A_j) and (A_k, G_j)
                    for pi in 0..p {
                        for mi in 0..m {
                            h[(gk0 + pi + p * i, aj0 + mi + m * i2)] =
                                bj.g[(pi, i2)] * bk.a[(mi, i)].conj() * ss;
                            h[(ak0 + mi + m * i, gj0 + pi + p * i2)] =
                                bk.g[(pi, i)].conj() * bj.a[(mi, i2)] * ss;
                        }
                    }
                }
                for ti in 0..t {
                    let sk = bk.s[ti].conj();
                    for pi in 0..p {
                        h[(gk0 + pi + p * i, sj0 + ti)] = sk * xj_ak[(pi, i)];
                    }
                    for mi in 0..m {
                        h[(ak0 + mi + m * i, sj0 + ti)] = sk * gk_xj[(i, mi)];
                    }
                }
            }
            for ti in 0..t {
                let sj = bj.s[ti];
                for i2 in 0..lj {
                    for pi in 0..p {
                        h[(sk0 + ti, gj0 + pi + p * i2)] = sj * xk_aj[(pi, i2)];
                    }
                    for mi in 0..m {
                        h[(sk0 + ti, aj0 + mi + m * i2)] = sj * gj_xk[(i2, mi)];
                    }
                }
            }
            let tr: Complex64 = xs[k].iter().zip(xj.iter()).map(|(a, b)| a.conj() * b).sum();
            for ti in 0..t {
                h[(sk0 + ti, sj0 + ti)] = tr;
            }
        }
    }
    h
}

/// SVD-based initialization from the regularized pilot pseudo-inverse.
/// Within a block, paths are ordered by descending singular value.
pub fn btd_init(
    y: &Tensor3,
    pilots: &PilotMatrix,
    block_sizes: &[usize],
    eps: f64,
) -> Result<BtdModel> {
    let (p, m, t) = y.dims();
    let so = pilots.matrix();
    if so.nrows() != t {
        return Err(dim_err(format!(
            "pilots have {} rows, tensor has T={t}",
            so.nrows()
        )));
    }
    if block_sizes.len() != so.ncols() {
        return Err(dim_err(format!(
            "{} block sizes for {} pilot columns",
            block_sizes.len(),
            so.ncols()
        )));
    }
    if !(eps > 0.0) {
        return Err(arg_err("regularization ε must be positive"));
    }
    for (k, &l) in block_sizes.iter().enumerate() {
        if l == 0 || l > p.min(m) {
            return Err(Error::Unidentifiable(format!(
                "block {k} has L={l} outside 1..={}",
                p.min(m)
            )));
        }
    }
    let x3 = regularized_pinv(so, eps) * y.unfold(3)?;
    let blocks = block_sizes
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let xk = ComplexMatrix::from_fn(p, m, |pi, mi| x3[(k, pi + p * mi)]);
            let (u, sv, v) = svd_sorted(&xk);
            let g = ComplexMatrix::from_fn(p, l, |pi, i| u[(pi, i)] * sv[i].sqrt());
            let a = ComplexMatrix::from_fn(m, l, |mi, i| v[(mi, i)].conj() * sv[i].sqrt());
            BtdBlock {
                g,
                a,
                s: so.column(k).into_owned(),
            }
        })
        .collect();
    BtdModel::new(blocks)
}

/// `(SᴴS + ε‖SᴴS‖₂ I)⁻¹ Sᴴ`.
pub fn regularized_pinv(s: &ComplexMatrix, eps: f64) -> ComplexMatrix {
    let gram = s.adjoint() * s;
    let scale = crate::linalg::singular_values(&gram)
        .first()
        .copied()
        .unwrap_or(0.0);
    let mut reg = gram;
    for i in 0..reg.nrows() {
        reg[(i, i)] += c64(eps * scale, 0.0);
    }
    let (x, _) = crate::linalg::solve_hpd(&reg, &s.adjoint());
    x
}

pub const DEFAULT_INIT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalSolver {
    /// Dense Cholesky below `DENSE_LIMIT` unknowns, PCG above.
    Auto,
    Dense,
    /// Conjugate gradients preconditioned by the per-factor diagonal blocks.
    Pcg,
}

const DENSE_LIMIT: usize = 900;

#[derive(Debug, Clone, PartialEq)]
pub struct NlsOptions {
    pub max_iters: usize,
    /// Relative cost decrease below which an accepted step ends the run.
    pub tol: f64,
    pub solver: NormalSolver,
}

impl Default for NlsOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-12,
            solver: NormalSolver::Auto,
        }
    }
}

/// Final optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct NlsState {
    /// `[Re m; Im m]`.
    pub params: Vec<f64>,
    pub lambda: f64,
    /// `‖μ‖`.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `½‖μ‖²` after every accepted step (index 0 is the initialization).
    pub cost_history: Vec<f64>,
}

fn stack_real(m: &[Complex64]) -> Vec<f64> {
    m.iter()
        .map(|z| z.re)
        .chain(m.iter().map(|z| z.im))
        .collect()
}

fn cost_of(r: &Tensor3) -> f64 {
    0.5 * r.norm_sq()
}

/// Levenberg–Marquardt refinement of `init` against `y`.
pub fn btd_nls(y: &Tensor3, init: &BtdModel, opts: &NlsOptions) -> Result<(BtdModel, NlsState)> {
    if init.dims() != y.dims() {
        return Err(dim_err(format!(
            "model dims {:?} vs tensor {:?}",
            init.dims(),
            y.dims()
        )));
    }
    let mut model = init.clone();
    let mut r = residual(y, &model)?;
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        return Err(Error::NonFinite("initial residual".into()));
    }
    let floor = 1e-30 * y.norm_sq().max(f64::MIN_POSITIVE);
    let n = model.n_params();
    let use_dense = match opts.solver {
        NormalSolver::Dense => true,
        NormalSolver::Pcg => false,
        NormalSolver::Auto => n <= DENSE_LIMIT,
    };

    let mut history = vec![cost];
    let mut lambda = f64::NAN;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        iterations += 1;
        if cost <= floor {
            converged = true;
            break;
        }
        let grad = apply_jh(&model, &r);
        let system = if use_dense {
            LinearSystem::Dense(gram_matrix(&model))
        } else {
            LinearSystem::Implicit(Preconditioner::new(&model))
        };
        if lambda.is_nan() {
            lambda = 1e-3 * system.mean_diag(&model);
            if !(lambda > 0.0) {
                lambda = 1e-12;
            }
        }
        let params = model.to_params();
        let mut accepted = None;
        for _ in 0..60 {
            let step = match system.solve(&model, &grad, lambda) {
                Some(s) => s,
                None => {
                    lambda *= 2.0;
                    continue;
                }
            };
            if step.iter().any(|z| !z.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "LM step at iteration {iterations}"
                )));
            }
            let trial: Vec<Complex64> = params.iter().zip(&step).map(|(a, b)| a + b).collect();
            let trial_model = model.with_params(&trial)?;
            let trial_r = residual(y, &trial_model)?;
            let trial_cost = cost_of(&trial_r);
            if !trial_cost.is_finite() {
                return Err(Error::NonFinite(format!(
                    "residual at iteration {iterations}"
                )));
            }
            if trial_cost < cost {
                lambda *= 0.5;
                accepted = Some((trial_model, trial_r, trial_cost));
                break;
            }
            lambda *= 2.0;
        }
        match accepted {
            Some((m2, r2, c2)) => {
                debug_assert!(c2 <= cost);
                let rel = (cost - c2) / cost;
                model = m2;
                r = r2;
                cost = c2;
                history.push(cost);
                if rel < opts.tol || cost <= floor {
                    converged = true;
                    break;
                }
            }
            None => {
                // No descent direction left at any damping: stationary point.
                converged = true;
                break;
            }
        }
    }

    let state = NlsState {
        params: stack_real(&model.to_params()),
        lambda,
        residual_norm: (2.0 * cost).sqrt(),
        iterations,
        converged,
        cost_history: history,
    };
    Ok((model, state))
}

enum LinearSystem {
    Dense(ComplexMatrix),
    Implicit(Preconditioner),
}

impl LinearSystem {
    fn mean_diag(&self, model: &BtdModel) -> f64 {
        match self {
            LinearSystem::Dense(h) => {
                (0..h.nrows()).map(|i| h[(i, i)].re).sum::<f64>() / h.nrows() as f64
            }
            LinearSystem::Implicit(pc) => pc.mean_diag(model),
        }
    }

    /// `Δ = −(JᴴJ + λI)⁻¹ Jᴴμ`; `None` when the damped matrix is not
    /// numerically positive definite.
    fn solve(&self, model: &BtdModel, grad: &[Complex64], lambda: f64) -> Option<Vec<Complex64>> {
        match self {
            LinearSystem::Dense(h) => {
                let mut a = h.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += c64(lambda, 0.0);
                }
                let ch = a.cholesky()?;
                let b = ComplexVector::from_iterator(grad.len(), grad.iter().map(|z| -z));
                Some(ch.solve(&b).iter().copied().collect())
            }
            LinearSystem::Implicit(pc) => pcg(model, pc, grad, lambda),
        }
    }
}

/// Per-factor diagonal blocks of `JᴴJ`: all `G` entries at one subcarrier,
/// all `A` entries at one RF chain, all `s` entries at one symbol.
struct Preconditioner {
    c_g: ComplexMatrix,
    c_a: ComplexMatrix,
    c_s: ComplexMatrix,
}

impl Preconditioner {
    fn new(model: &BtdModel) -> Self {
        let g = model.to_factor_set();
        let sgram = g.s.adjoint() * &g.s;
        let c_g = (g.a.adjoint() * &g.a).component_mul(&sgram);
        let c_a = (g.g.adjoint() * &g.g).component_mul(&sgram);
        let xs: Vec<ComplexMatrix> = model.blocks.iter().map(BtdBlock::matrix).collect();
        let k = xs.len();
        let c_s = ComplexMatrix::from_fn(k, k, |i, j| {
            xs[i]
                .iter()
                .zip(xs[j].iter())
                .map(|(a, b)| a.conj() * b)
                .sum()
        });
        Self { c_g, c_a, c_s }
    }

    fn mean_diag(&self, model: &BtdModel) -> f64 {
        let (p, m, t) = model.dims();
        let tr = |c: &ComplexMatrix| (0..c.nrows()).map(|i| c[(i, i)].re).sum::<f64>();
        (p as f64 * tr(&self.c_g) + m as f64 * tr(&self.c_a) + t as f64 * tr(&self.c_s))
            / model.n_params() as f64
    }

    fn factors(&self, lambda: f64) -> Option<[nalgebra::Cholesky<Complex64, nalgebra::Dyn>; 3]> {
        let damp = |c: &ComplexMatrix| {
            let mut d = c.clone();
            for i in 0..d.nrows() {
                d[(i, i)] += c64(lambda, 0.0);
            }
            d.cholesky()
        };
        Some([damp(&self.c_g)?, damp(&self.c_a)?, damp(&self.c_s)?])
    }
}

/// Apply the block-Jacobi inverse to `r` (parameter layout).
fn precondition(
    model: &BtdModel,
    chol: &[nalgebra::Cholesky<Complex64, nalgebra::Dyn>; 3],
    r: &[Complex64],
) -> Vec<Complex64> {
    let (p, m, t) = model.dims();
    let sizes = model.block_sizes();
    let l: usize = sizes.iter().sum();
    let k = sizes.len();
    // Gather into factor-major matrices: rows = global path (or user), cols = p/m/t.
    let mut rg = ComplexMatrix::zeros(l, p);
    let mut ra = ComplexMatrix::zeros(l, m);
    let mut rs = ComplexMatrix::zeros(k, t);
    let mut off = 0;
    let mut col = 0;
    for (u, &lk) in sizes.iter().enumerate() {
        for i in 0..lk {
            for pi in 0..p {
                rg[(col + i, pi)] = r[off + pi + p * i];
            }
        }
        off += p * lk;
        for i in 0..lk {
            for mi in 0..m {
                ra[(col + i, mi)] = r[off + mi + m * i];
            }
        }
        off += m * lk;
        for ti in 0..t {
            rs[(u, ti)] = r[off + ti];
        }
        off += t;
        col += lk;
    }
    let zg = chol[0].solve(&rg);
    let za = chol[1].solve(&ra);
    let zs = chol[2].solve(&rs);
    let mut out = vec![c64(0.0, 0.0); r.len()];
    let mut off = 0;
    let mut col = 0;
    for (u, &lk) in sizes.iter().enumerate() {
        for i in 0..lk {
            for pi in 0..p {
                out[off + pi + p * i] = zg[(col + i, pi)];
            }
        }
        off += p * lk;
        for i in 0..lk {
            for mi in 0..m {
                out[off + mi + m * i] = za[(col + i, mi)];
            }
        }
        off += m * lk;
        for ti in 0..t {
            out[off + ti] = zs[(u, ti)];
        }
        off += t;
        col += lk;
    }
    out
}

fn dotc(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn pcg(
    model: &BtdModel,
    pc: &Preconditioner,
    grad: &[Complex64],
    lambda: f64,
) -> Option<Vec<Complex64>> {
    let chol = pc.factors(lambda)?;
    let n = grad.len();
    let apply = |v: &[Complex64]| -> Vec<Complex64> {
        let jv = apply_j(model, v).expect("layout matches");
        let mut out = apply_jh(model, &jv);
        for (o, x) in out.iter_mut().zip(v) {
            *o += x * lambda;
        }
        out
    };
    let b: Vec<Complex64> = grad.iter().map(|z| -z).collect();
    let bnorm = dotc(&b, &b).re.sqrt();
    if bnorm == 0.0 {
        return Some(vec![c64(0.0, 0.0); n]);
    }
    let mut x = vec![c64(0.0, 0.0); n];
    let mut r = b.clone();
    let mut z = precondition(model, &chol, &r);
    let mut d = z.clone();
    let mut rz = dotc(&r, &z).re;
    for _ in 0..n.min(500) {
        let hd = apply(&d);
        let dhd = dotc(&d, &hd).re;
        if !(dhd > 0.0) {
            return None;
        }
        let alpha = rz / dhd;
        for i in 0..n {
            x[i] += d[i] * alpha;
            r[i] -= hd[i] * alpha;
        }
        if dotc(&r, &r).re.sqrt() <= 1e-10 * bnorm {
            break;
        }
        z = precondition(model, &chol, &r);
        let rz_new = dotc(&r, &z).re;
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            d[i] = z[i] + d[i] * beta;
        }
    }
    Some(x)
}

/// Block sizes `(L_1, …, L_K)` of the generalized Kruskal test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneralizedKruskal {
    pub k_g: usize,
    pub k_a: usize,
    pub k_s: usize,
    /// `PM ≥ Σ L_k²`.
    pub dimension_ok: bool,
    /// `k′_G + k′_A + k_S ≥ 2K + 2`.
    pub rank_ok: bool,
}

impl GeneralizedKruskal {
    pub fn satisfied(&self) -> bool {
        self.dimension_ok && self.rank_ok
    }
}

/// Generalized k-rank of a block-partitioned matrix: the largest `r` such
/// that every set of `r` blocks has full column rank.
pub fn generalized_k_rank(blocks: &[ComplexMatrix], tol: f64) -> usize {
    let k = blocks.len();
    for r in 1..=k {
        let ok = Combinations::new(k, r).all(|sel| {
            let cols: Vec<_> = sel
                .iter()
                .flat_map(|&i| blocks[i].column_iter().map(|c| c.into_owned()))
                .collect();
            let m = ComplexMatrix::from_columns(&cols);
            m.nrows() >= m.ncols() && min_singular_value_normalized(&m) > tol
        });
        if !ok {
            return r - 1;
        }
    }
    k
}

pub fn generalized_kruskal_check(model: &BtdModel) -> GeneralizedKruskal {
    let (p, m, _) = model.dims();
    let gs: Vec<ComplexMatrix> = model.blocks.iter().map(|b| b.g.clone()).collect();
    let as_: Vec<ComplexMatrix> = model.blocks.iter().map(|b| b.a.clone()).collect();
    let s =
        ComplexMatrix::from_columns(&model.blocks.iter().map(|b| b.s.clone()).collect::<Vec<_>>());
    let k_g = generalized_k_rank(&gs, KRANK_TOL);
    let k_a = generalized_k_rank(&as_, KRANK_TOL);
    let k_s = crate::cpd::kruskal_rank(&s, KRANK_TOL);
    let sum_sq: usize = model.block_sizes().iter().map(|l| l * l).sum();
    let k = model.blocks.len();
    GeneralizedKruskal {
        k_g,
        k_a,
        k_s,
        dimension_ok: p * m >= sum_sq,
        rank_ok: k_g + k_a + k_s >= 2 * k + 2,
    }
}

/// `‖Ŷ − Y‖ / ‖Y‖`.
pub fn btd_relative_error(y: &Tensor3, model: &BtdModel) -> Result<f64> {
    Ok(residual(y, model)?.norm() / y.norm())
}

/// Recovered-to-true block transforms `(λ_3, Λ_1, Λ_2)` with
/// `Ĝ ≈ G Λ_1`, `Â ≈ A Λ_2`, `ŝ ≈ λ_3 s`.
pub fn block_transforms(
    est: &BtdBlock,
    truth: &BtdBlock,
) -> (Complex64, ComplexMatrix, ComplexMatrix) {
    let pg = crate::linalg::pinv(&truth.g, 1e-12);
    let pa = crate::linalg::pinv(&truth.a, 1e-12);
    let lam3 = truth.s.dotc(&est.s) / truth.s.norm_squared();
    (lam3, pg * &est.g, pa * &est.a)
}

/// `‖λ_3 Λ_1 Λ_2ᵀ − I‖_F` for one block.
pub fn scaling_law_defect(est: &BtdBlock, truth: &BtdBlock) -> f64 {
    let (l3, l1, l2) = block_transforms(est, truth);
    let prod = l1 * l2.transpose() * l3;
    let id = ComplexMatrix::identity(prod.nrows(), prod.ncols());
    frob_norm_sq(&(prod - id)).sqrt()
}
