//! Fisher information and Cramér–Rao bounds for the LoS model with one path
//! per user.
//!
//! Parameter order is `ξ = [θ; r; τ; Re α; Im α]`, each block of length `K`.
//! The mean `μ(ξ)` uses exact element distances, so its Jacobian is the
//! derivative of the same function.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{arg_err, Result};
use crate::geometry::{delay_response, element_offset, DistanceModel, SPEED_OF_LIGHT};
use crate::linalg::{c64, pinv, ComplexMatrix};
use crate::signal::Scenario;

/// Parameter families of `ξ`, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    Angle,
    Range,
    Delay,
    GainRe,
    GainIm,
}

impl Param {
    pub const ALL: [Param; 5] = [
        Param::Angle,
        Param::Range,
        Param::Delay,
        Param::GainRe,
        Param::GainIm,
    ];

    fn block(self) -> usize {
        match self {
            Param::Angle => 0,
            Param::Range => 1,
            Param::Delay => 2,
            Param::GainRe => 3,
            Param::GainIm => 4,
        }
    }

    /// Indices of this family in `ξ` for `k` users.
    pub fn indices(self, k: usize) -> std::ops::Range<usize> {
        self.block() * k..(self.block() + 1) * k
    }
}

fn require_los(sc: &Scenario) -> Result<()> {
    if !sc.is_los() {
        return Err(arg_err("bounds are defined for one LoS path per user"));
    }
    Ok(())
}

/// Exact-distance steering vector and its derivatives in `θ` and `r`.
fn steering_with_derivatives(
    angle: f64,
    range: f64,
    sc: &Scenario,
) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
    let cfg = &sc.cfg;
    let n = cfg.n_antennas;
    let d = cfg.spacing();
    let k = 2.0 * std::f64::consts::PI / cfg.wavelength();
    let amp = 1.0 / (n as f64).sqrt();
    let (sin, cos) = angle.sin_cos();
    let mut b = Vec::with_capacity(n);
    let mut db_dth = Vec::with_capacity(n);
    let mut db_dr = Vec::with_capacity(n);
    for e in 0..n {
        let x = e as f64 * d;
        let off = element_offset(range, angle, e, d, DistanceModel::Exact);
        let rn = off + range;
        let z = Complex64::from_polar(amp, -k * off);
        let drn_dth = -range * x * cos / rn;
        let drn_dr = (range - x * sin) / rn;
        b.push(z);
        db_dth.push(z * c64(0.0, -k * drn_dth));
        db_dr.push(z * c64(0.0, -k * (drn_dr - 1.0)));
    }
    (b, db_dth, db_dr)
}

fn project(w: &ComplexMatrix, v: &[Complex64]) -> Vec<Complex64> {
    (w.adjoint() * nalgebra::DVector::from_column_slice(v))
        .data
        .into()
}

/// `vec(s ∘ x ∘ g)` in tensor storage order (`p` fastest, then `m`, `t`).
fn outer3(g: &[Complex64], x: &[Complex64], s: &[Complex64]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(g.len() * x.len() * s.len());
    for st in s {
        for xm in x {
            let c = st * xm;
            out.extend(g.iter().map(|gp| gp * c));
        }
    }
    out
}

/// Noiseless received tensor `μ(ξ)` (vectorized) with exact-distance steering.
pub fn mean_vector(sc: &Scenario) -> Result<Vec<Complex64>> {
    require_los(sc)?;
    let cfg = &sc.cfg;
    let w = sc.combiner.matrix();
    let so = sc.pilots.matrix();
    let mut mu = vec![c64(0.0, 0.0); cfg.n_subcarriers * cfg.n_rf * cfg.n_symbols];
    for (k, group) in sc.paths.iter().enumerate() {
        let path = &group[0];
        let (b, _, _) = steering_with_derivatives(path.angle, path.range, sc);
        let x: Vec<Complex64> = project(w, &b).into_iter().map(|z| z * path.gain).collect();
        let s: Vec<Complex64> = so.column(k).iter().copied().collect();
        for (m, v) in mu
            .iter_mut()
            .zip(outer3(&delay_response(path.delay, cfg), &x, &s))
        {
            *m += v;
        }
    }
    Ok(mu)
}

/// `∂μ/∂ξ` (`MPT × 5K`).
pub fn mean_jacobian(sc: &Scenario) -> Result<ComplexMatrix> {
    require_los(sc)?;
    let cfg = &sc.cfg;
    let k_users = cfg.n_users;
    let rows = cfg.n_subcarriers * cfg.n_rf * cfg.n_symbols;
    let w = sc.combiner.matrix();
    let so = sc.pilots.matrix();
    let freqs = cfg.subcarrier_freqs();
    let mut j = ComplexMatrix::zeros(rows, 5 * k_users);
    for (k, group) in sc.paths.iter().enumerate() {
        let path = &group[0];
        let alpha = path.gain;
        let (b, db_dth, db_dr) = steering_with_derivatives(path.angle, path.range, sc);
        let (wb, wb_th, wb_r) = (project(w, &b), project(w, &db_dth), project(w, &db_dr));
        let g = delay_response(path.delay, cfg);
        let dg: Vec<Complex64> = g
            .iter()
            .zip(&freqs)
            .map(|(z, f)| z * c64(0.0, -2.0 * std::f64::consts::PI * f))
            .collect();
        let s: Vec<Complex64> = so.column(k).iter().copied().collect();
        let scaled = |v: &[Complex64]| -> Vec<Complex64> { v.iter().map(|z| z * alpha).collect() };
        let cols = [
            (Param::Angle, outer3(&g, &scaled(&wb_th), &s)),
            (Param::Range, outer3(&g, &scaled(&wb_r), &s)),
            (Param::Delay, outer3(&dg, &scaled(&wb), &s)),
            (Param::GainRe, outer3(&g, &wb, &s)),
            (
                Param::GainIm,
                outer3(&g, &wb, &s)
                    .into_iter()
                    .map(|z| z * c64(0.0, 1.0))
                    .collect(),
            ),
        ];
        for (param, col) in cols {
            let c = param.indices(k_users).start + k;
            for (r, z) in col.into_iter().enumerate() {
                j[(r, c)] = z;
            }
        }
    }
    Ok(j)
}

/// `F_ξ = (2/σ²) Re(JᴴJ)`, symmetrized.
pub fn fim(sc: &Scenario, sigma2: f64) -> Result<DMatrix<f64>> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(arg_err(format!(
            "noise variance must be positive and finite, got {sigma2}"
        )));
    }
    let j = mean_jacobian(sc)?;
    let gram = j.adjoint() * &j;
    let n = gram.nrows();
    let f = DMatrix::from_fn(n, n, |a, b| 2.0 / sigma2 * gram[(a, b)].re);
    Ok((&f + f.transpose()) * 0.5)
}

/// `F⁻¹` through Jacobi-scaled Cholesky; falls back to the pseudo-inverse
/// (second value `true`) for singular geometries.
pub fn invert_fim(f: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = f.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            if f[(i, i)] > 0.0 {
                1.0 / f[(i, i)].sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |a, b| f[(a, b)] * scale[a] * scale[b]);
    if let Some(ch) = scaled.clone().cholesky() {
        let inv = ch.inverse();
        let cond_ok = (0..n).all(|i| inv[(i, i)].is_finite() && inv[(i, i)] < 1e14);
        if cond_ok {
            return (
                DMatrix::from_fn(n, n, |a, b| inv[(a, b)] * scale[a] * scale[b]),
                false,
            );
        }
    }
    let c = ComplexMatrix::from_fn(n, n, |a, b| c64(scaled[(a, b)], 0.0));
    let p = pinv(&c, 1e-12);
    (
        DMatrix::from_fn(n, n, |a, b| p[(a, b)].re * scale[a] * scale[b]),
        true,
    )
}

/// `tr([F⁻¹]_{I_a, I_a})` for one parameter family.
pub fn crb_params(f: &DMatrix<f64>, which: Param) -> Result<f64> {
    if f.nrows() != f.ncols() || f.nrows() % 5 != 0 || f.nrows() == 0 {
        return Err(arg_err("FIM must be square with 5K rows"));
    }
    let (inv, _) = invert_fim(f);
    Ok(which.indices(f.nrows() / 5).map(|i| inv[(i, i)]).sum())
}

/// `∂(p₁, p₂)/∂(τ, θ)` for `p = (cτ cos θ, cτ sin θ)`.
pub fn position_jacobian(delay: f64, angle: f64) -> [[f64; 2]; 2] {
    let (s, c) = angle.sin_cos();
    let ct = SPEED_OF_LIGHT * delay;
    [[SPEED_OF_LIGHT * c, -ct * s], [SPEED_OF_LIGHT * s, ct * c]]
}

/// `∂(τ, θ)/∂(p₁, p₂)`, the inverse of [`position_jacobian`].
pub fn inverse_position_jacobian(delay: f64, angle: f64) -> Result<[[f64; 2]; 2]> {
    if !(delay > 0.0) {
        return Err(arg_err(format!("delay must be positive, got {delay}")));
    }
    let (s, c) = angle.sin_cos();
    let cc = SPEED_OF_LIGHT;
    Ok([[c / cc, s / cc], [-s / (cc * delay), c / (cc * delay)]])
}

/// `J_pos = ∂p/∂ξ` (`2K × 5K`); zero in the `r` and `α` columns.
pub fn position_map(sc: &Scenario) -> Result<DMatrix<f64>> {
    require_los(sc)?;
    let k = sc.cfg.n_users;
    let mut jp = DMatrix::zeros(2 * k, 5 * k);
    for (u, group) in sc.paths.iter().enumerate() {
        let path = &group[0];
        if !(path.delay > 0.0) {
            return Err(arg_err(format!("user {u} has non-positive delay")));
        }
        let d = position_jacobian(path.delay, path.angle);
        let (it, ith) = (
            Param::Delay.indices(k).start + u,
            Param::Angle.indices(k).start + u,
        );
        for row in 0..2 {
            jp[(2 * u + row, it)] = d[row][0];
            jp[(2 * u + row, ith)] = d[row][1];
        }
    }
    Ok(jp)
}

/// `tr(J_pos F⁻¹ J_posᵀ)` summed over users.
pub fn crb_position(f: &DMatrix<f64>, sc: &Scenario) -> Result<f64> {
    let (inv, _) = invert_fim(f);
    let jp = position_map(sc)?;
    if jp.ncols() != inv.nrows() {
        return Err(arg_err("FIM size does not match the scenario"));
    }
    Ok((&jp * inv * jp.transpose()).trace())
}

/// All bounds for one scenario and noise level.
#[derive(Debug, Clone)]
pub struct CrbReport {
    pub fim: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    /// Set when `F` had to be pseudo-inverted.
    pub singular: bool,
    position_cov: DMatrix<f64>,
}

impl CrbReport {
    pub fn new(sc: &Scenario, sigma2: f64) -> Result<Self> {
        let fim = fim(sc, sigma2)?;
        let (inverse, singular) = invert_fim(&fim);
        let jp = position_map(sc)?;
        let position_cov = &jp * &inverse * jp.transpose();
        Ok(Self {
            fim,
            inverse,
            singular,
            position_cov,
        })
    }

    pub fn n_users(&self) -> usize {
        self.fim.nrows() / 5
    }

    /// Summed over users.
    pub fn param(&self, which: Param) -> f64 {
        which
            .indices(self.n_users())
            .map(|i| self.inverse[(i, i)])
            .sum()
    }

    /// Summed over users.
    pub fn position(&self) -> f64 {
        self.position_cov.trace()
    }

    pub fn position_per_user(&self) -> Vec<f64> {
        (0..self.n_users())
            .map(|u| self.position_cov[(2 * u, 2 * u)] + self.position_cov[(2 * u + 1, 2 * u + 1)])
            .collect()
    }
}
