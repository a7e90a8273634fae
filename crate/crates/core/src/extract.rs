//! Mapping recovered factors to users, path parameters, gains, channels and
//! positions.
//!
//! All searches run on nested lattices: a coarse grid, then a fine window of
//! ±1 coarse step around the coarse winner (re-centred while the best point
//! sits on the window edge). One-dimensional searches can additionally be
//! polished by golden-section maximization inside ±1 fine step.

use num_complex::Complex64;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::geometry::{delay_response, steering_vector, PathParams, SystemConfig, SPEED_OF_LIGHT};
use crate::linalg::{c64, orthonormal_basis, pinv, vec_norm, ComplexMatrix, ComplexVector};
use crate::pilots::{Combiner, PilotMatrix};

/// Correlations below this are treated as "nothing there".
pub const DETECTION_FLOOR: f64 = 1e-6;
const MAX_RECENTER: usize = 16;
const COARSE_CANDIDATES: usize = 4;
const POLISH_ROUNDS: usize = 60;
const POLISH_FD_STEP: f64 = 1e-2;
const POLISH_MAX_STEP: f64 = 4.0;

/// Search grid specification shared by the delay and polar searches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchGrids {
    /// Coarse delay grid spans `[0, tau_max]`.
    pub tau_max: f64,
    pub n_delay: usize,
    /// Fine delay step is `coarse step / delay_refine`.
    pub delay_refine: usize,
    /// Angle grid is uniform in `sin θ` over `[−max_sin, max_sin]`.
    pub max_sin: f64,
    pub n_angle: usize,
    /// Distance rings are uniform in `1/r` over `[r_min, r_max]`.
    pub r_min: f64,
    pub r_max: f64,
    pub n_range: usize,
    /// Fine polar steps are `coarse / polar_refine` in both coordinates.
    pub polar_refine: usize,
    /// Golden-section polishing of 1-D searches.
    pub polish: bool,
}

impl SearchGrids {
    /// Grids covering users up to `max_user_range` and paths with up to
    /// `max_excess_delay` of extra delay. The delay span is capped below the
    /// `P/B` ambiguity period.
    pub fn for_config(cfg: &SystemConfig, max_user_range: f64, max_excess_delay: f64) -> Self {
        let n_delay = 256;
        let wanted = 1.2 * (max_user_range / SPEED_OF_LIGHT + max_excess_delay);
        let alias = cfg.delay_ambiguity() * (n_delay - 1) as f64 / n_delay as f64;
        Self {
            tau_max: wanted.min(alias),
            n_delay,
            delay_refine: 32,
            max_sin: 60f64.to_radians().sin(),
            n_angle: 256,
            r_min: 5.0,
            r_max: (1.2 * cfg.rayleigh_distance()).max(1.2 * max_user_range),
            n_range: 32,
            polar_refine: 16,
            polish: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_max > 0.0 && self.max_sin > 0.0 && self.max_sin < 1.0) {
            return Err(arg_err("grid spans must be positive (and max_sin < 1)"));
        }
        if !(self.r_min > 0.0 && self.r_max > self.r_min) {
            return Err(arg_err("need 0 < r_min < r_max"));
        }
        if self.n_delay < 2 || self.n_angle < 2 || self.n_range < 2 {
            return Err(arg_err("grids need at least two points"));
        }
        if self.delay_refine == 0 || self.polar_refine == 0 {
            return Err(arg_err("refinement factors must be positive"));
        }
        Ok(())
    }

    pub fn delay_step(&self) -> f64 {
        self.tau_max / (self.n_delay - 1) as f64
    }

    pub fn fine_delay_step(&self) -> f64 {
        self.delay_step() / self.delay_refine as f64
    }

    /// Delay at fine-lattice index `n`.
    pub fn delay_at(&self, n: i64) -> f64 {
        n as f64 * self.tau_max / ((self.n_delay - 1) * self.delay_refine) as f64
    }

    pub fn sin_step(&self) -> f64 {
        2.0 * self.max_sin / (self.n_angle - 1) as f64
    }

    pub fn fine_sin_step(&self) -> f64 {
        self.sin_step() / self.polar_refine as f64
    }

    /// `sin θ` at fine-lattice index `n`.
    pub fn sin_at(&self, n: i64) -> f64 {
        -self.max_sin
            + n as f64 * 2.0 * self.max_sin / ((self.n_angle - 1) * self.polar_refine) as f64
    }

    fn inv_range_min(&self) -> f64 {
        1.0 / self.r_max
    }

    pub fn inv_range_step(&self) -> f64 {
        (1.0 / self.r_min - 1.0 / self.r_max) / (self.n_range - 1) as f64
    }

    pub fn fine_inv_range_step(&self) -> f64 {
        self.inv_range_step() / self.polar_refine as f64
    }

    /// `1/r` at fine-lattice index `n`.
    pub fn inv_range_at(&self, n: i64) -> f64 {
        let span = 1.0 / self.r_min - 1.0 / self.r_max;
        self.inv_range_min() + n as f64 * span / ((self.n_range - 1) * self.polar_refine) as f64
    }

    fn delay_fine_max(&self) -> i64 {
        ((self.n_delay - 1) * self.delay_refine) as i64
    }

    fn sin_fine_max(&self) -> i64 {
        ((self.n_angle - 1) * self.polar_refine) as i64
    }

    fn range_fine_max(&self) -> i64 {
        ((self.n_range - 1) * self.polar_refine) as i64
    }
}

/// Polar-domain dictionary projected through the combiner: column
/// `q = i_angle · n_range + i_range` is `Wᴴ b(θ_q, r_q)`.
#[derive(Debug, Clone)]
pub struct PolarCodebook {
    pub cfg: SystemConfig,
    pub grids: SearchGrids,
    w: ComplexMatrix,
    /// `Wᴴ` in faer layout for batched ring evaluation.
    wh: faer::Mat<Complex64>,
    projected: ComplexMatrix,
    norms: Vec<f64>,
}

impl PolarCodebook {
    pub fn new(cfg: &SystemConfig, grids: &SearchGrids, combiner: &Combiner) -> Result<Self> {
        grids.validate()?;
        let w = combiner.matrix().clone();
        if w.nrows() != cfg.n_antennas {
            return Err(dim_err("combiner rows must equal N"));
        }
        let q = grids.n_angle * grids.n_range;
        let lambda = cfg.wavelength();
        let mut dict = faer::Mat::<Complex64>::zeros(cfg.n_antennas, q);
        for ia in 0..grids.n_angle {
            let u = grids.sin_at((ia * grids.polar_refine) as i64);
            for ir in 0..grids.n_range {
                let rho = grids.inv_range_at((ir * grids.polar_refine) as i64);
                let b = steering_vector(u.asin(), 1.0 / rho, cfg, lambda);
                for (e, z) in b.into_iter().enumerate() {
                    dict[(e, ia * grids.n_range + ir)] = z;
                }
            }
        }
        let wh = faer::Mat::from_fn(w.ncols(), w.nrows(), |i, j| w[(j, i)].conj());
        let mut proj = faer::Mat::<Complex64>::zeros(w.ncols(), q);
        faer::linalg::matmul::matmul(
            proj.as_mut(),
            faer::Accum::Replace,
            wh.as_ref(),
            dict.as_ref(),
            c64(1.0, 0.0),
            faer::Par::Seq,
        );
        let projected = ComplexMatrix::from_fn(w.ncols(), q, |i, j| proj[(i, j)]);
        let norms = projected.column_iter().map(|c| c.norm()).collect();
        Ok(Self {
            cfg: *cfg,
            grids: *grids,
            w,
            wh,
            projected,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.projected.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn combiner(&self) -> &ComplexMatrix {
        &self.w
    }

    /// `Wᴴ B̄` (`M × Q`).
    pub fn projected_atoms(&self) -> &ComplexMatrix {
        &self.projected
    }

    pub fn atom_norms(&self) -> &[f64] {
        &self.norms
    }

    /// `(θ, r)` of atom `q`.
    pub fn position(&self, q: usize) -> (f64, f64) {
        let g = &self.grids;
        let (ia, ir) = (q / g.n_range, q % g.n_range);
        let u = g.sin_at((ia * g.polar_refine) as i64);
        let rho = g.inv_range_at((ir * g.polar_refine) as i64);
        (u.asin(), 1.0 / rho)
    }

    /// Target metric of every fine ring on the fine angle column `nu`.
    /// Fresnel phases are affine in `1/r`, so consecutive rings differ by a
    /// fixed per-element rotation.
    fn ring_metrics(&self, target: &Target, nu: i64) -> Vec<f64> {
        use faer::linalg::matmul::matmul;
        let g = &self.grids;
        let n = self.cfg.n_antennas;
        let rings = (g.range_fine_max() + 1) as usize;
        let u = g.sin_at(nu);
        let k = 2.0 * std::f64::consts::PI / self.cfg.wavelength();
        let d = self.cfg.spacing();
        let amp = 1.0 / (n as f64).sqrt();
        let rho0 = g.inv_range_at(0);
        let drho = g.inv_range_at(1) - rho0;
        let mut atoms = faer::Mat::<Complex64>::zeros(n, rings);
        for e in 0..n {
            let x = e as f64 * d;
            let curv = -k * x * x * (1.0 - u * u) / 2.0;
            let mut b = Complex64::from_polar(amp, k * x * u + curv * rho0);
            let step = Complex64::from_polar(1.0, curv * drho);
            for i in 0..rings {
                atoms[(e, i)] = b;
                b *= step;
            }
        }
        let m = self.cfg.n_rf;
        let mut x = faer::Mat::<Complex64>::zeros(m, rings);
        matmul(
            x.as_mut(),
            faer::Accum::Replace,
            self.wh.as_ref(),
            atoms.as_ref(),
            c64(1.0, 0.0),
            faer::Par::Seq,
        );
        let (c, j) = (target.q.ncols(), target.picked.ncols());
        let basis = faer::Mat::from_fn(c + j, m, |i, r| {
            if i < c {
                target.q[(r, i)].conj()
            } else {
                target.picked[(r, i - c)].conj()
            }
        });
        let mut y = faer::Mat::<Complex64>::zeros(c + j, rings);
        matmul(
            y.as_mut(),
            faer::Accum::Replace,
            basis.as_ref(),
            x.as_ref(),
            c64(1.0, 0.0),
            faer::Par::Seq,
        );
        let qp = target.q.adjoint() * &target.picked;
        (0..rings)
            .map(|i| {
                let nx2: f64 = (0..m).map(|r| x[(r, i)].norm_sqr()).sum();
                let px = ComplexVector::from_fn(j, |t, _| y[(c + t, i)]);
                let rest2 = nx2 - px.norm_squared();
                if !(nx2 > 0.0) || rest2 < RESIDUAL_FLOOR * RESIDUAL_FLOOR * nx2 {
                    return 0.0;
                }
                let corr = ComplexVector::from_fn(c, |t, _| y[(t, i)]) - &qp * &px;
                (corr.norm_squared() / rest2).sqrt()
            })
            .collect()
    }

    /// `Wᴴ b(θ, r)` for arbitrary `(θ, r)`.
    pub fn project(&self, angle: f64, range: f64) -> ComplexVector {
        let b = steering_vector(angle, range, &self.cfg, self.cfg.wavelength());
        self.w.adjoint() * ComplexVector::from_vec(b)
    }
}

/// Candidates whose remainder after removing detected atoms is this small
/// (relative) are treated as already explained.
const RESIDUAL_FLOOR: f64 = 1e-3;

/// Search target: the span of the orthonormal `q`. Atoms already detected
/// (`picked`, orthonormal) are projected out of each candidate before
/// measuring `‖Qᴴx_⊥‖ / ‖x_⊥‖`, so every true atom of the span scores 1.
#[derive(Debug, Clone)]
struct Target {
    q: ComplexMatrix,
    picked: ComplexMatrix,
}

impl Target {
    fn new(q: ComplexMatrix) -> Self {
        let n = q.nrows();
        Self {
            q,
            picked: ComplexMatrix::zeros(n, 0),
        }
    }

    fn from_vector(v: &[Complex64]) -> Result<Self> {
        let n = vec_norm(v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::NoDetection(DETECTION_FLOOR));
        }
        Ok(Self::new(ComplexMatrix::from_iterator(
            v.len(),
            1,
            v.iter().map(|z| z / n),
        )))
    }

    fn from_block(m: &ComplexMatrix) -> Result<Self> {
        let q = orthonormal_basis(m, 1e-10);
        if q.ncols() == 0 {
            return Err(Error::NoDetection(DETECTION_FLOOR));
        }
        Ok(Self::new(q))
    }

    fn residual(&self, x: &[Complex64]) -> ComplexVector {
        let x = ComplexVector::from_column_slice(x);
        if self.picked.ncols() == 0 {
            return x;
        }
        &x - &self.picked * (self.picked.adjoint() * &x)
    }

    fn metric(&self, x: &[Complex64]) -> f64 {
        let nx = vec_norm(x);
        let r = self.residual(x);
        let nr = r.norm();
        if !(nx > 0.0) || nr < RESIDUAL_FLOOR * nx {
            return 0.0;
        }
        (self.q.adjoint() * &r).norm() / nr
    }

    /// Derivative of the squared metric along `x(t)` with `x'(t) = dx`.
    fn metric_sq_slope(&self, x: &[Complex64], dx: &[Complex64]) -> f64 {
        let r = self.residual(x);
        let dr = self.residual(dx);
        let den = r.norm_squared();
        if !(den > 0.0) {
            return 0.0;
        }
        let qr = self.q.adjoint() * &r;
        let qdr = self.q.adjoint() * &dr;
        let num = qr.norm_squared();
        let dnum = 2.0 * qr.dotc(&qdr).re;
        let dden = 2.0 * r.dotc(&dr).re;
        (dnum * den - num * dden) / (den * den)
    }

    fn pick(&mut self, atom: &[Complex64]) {
        let r = self.residual(atom);
        let n = r.norm();
        if n > 0.0 {
            let col = r / c64(n, 0.0);
            self.picked = self
                .picked
                .clone()
                .insert_column(self.picked.ncols(), c64(0.0, 0.0));
            let last = self.picked.ncols() - 1;
            self.picked.set_column(last, &col);
        }
    }
}

/// Hill-climbing fine search on an integer lattice `[0, max]` starting from
/// `centre`; windows of ±`half` are re-centred while the winner is on an edge.
fn lattice_refine_1d(centre: i64, half: i64, max: i64, metric: &impl Fn(i64) -> f64) -> (i64, f64) {
    let mut best = (centre, metric(centre));
    let mut c = centre;
    for _ in 0..MAX_RECENTER {
        let lo = (c - half).max(0);
        let hi = (c + half).min(max);
        for n in lo..=hi {
            let v = metric(n);
            if v > best.1 {
                best = (n, v);
            }
        }
        let on_edge = (best.0 == lo && lo > 0) || (best.0 == hi && hi < max);
        if !on_edge || best.0 == c {
            break;
        }
        c = best.0;
    }
    best
}

/// Root of a derivative that is positive at `lo` and negative at `hi`
/// (Illinois false position).
fn derivative_root(lo: f64, hi: f64, deriv: &impl Fn(f64) -> f64) -> Option<f64> {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (deriv(a), deriv(b));
    if !(fa > 0.0 && fb < 0.0) {
        return None;
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let x = (a * fb - b * fa) / (fb - fa);
        let fx = deriv(x);
        if fx == 0.0 || (b - a).abs() <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) {
            return Some(x);
        }
        if fx > 0.0 {
            a = x;
            fa = fx;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        } else {
            b = x;
            fb = fx;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        }
    }
    Some(0.5 * (a + b))
}

/// Coarse grid → fine lattice → optional polish for a 1-D coordinate
/// `x = to_coord(n)` on the fine lattice `0..=max`. The polish solves
/// `metric'(x) = 0` between the lattice neighbours of the winner.
fn search_1d(
    refine: usize,
    max: i64,
    to_coord: impl Fn(i64) -> f64,
    metric: impl Fn(f64) -> f64,
    deriv: Option<&dyn Fn(f64) -> f64>,
) -> Result<(f64, f64)> {
    let r = refine as i64;
    let at = |n: i64| metric(to_coord(n));
    let mut coarse = (0i64, f64::NEG_INFINITY);
    let mut n = 0;
    while n <= max {
        let v = at(n);
        if v > coarse.1 {
            coarse = (n, v);
        }
        n += r;
    }
    if !(coarse.1 >= DETECTION_FLOOR) {
        return Err(Error::NoDetection(DETECTION_FLOOR));
    }
    let (best_n, best_v) = lattice_refine_1d(coarse.0, r, max, &at);
    let x = to_coord(best_n);
    let Some(deriv) = deriv else {
        return Ok((x, best_v));
    };
    let lo = to_coord((best_n - 1).max(0));
    let hi = to_coord((best_n + 1).min(max));
    match derivative_root(lo, hi, &deriv) {
        Some(xp) => {
            let vp = metric(xp);
            // The metric is flat at the top; only reject genuine losses.
            Ok(if vp >= best_v - 1e-12 {
                (xp, vp.max(best_v))
            } else {
                (x, best_v)
            })
        }
        None => Ok((x, best_v)),
    }
}

fn run_delay_search(target: &Target, cfg: &SystemConfig, grids: &SearchGrids) -> Result<f64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    // Frequencies relative to the carrier: a common phase does not change
    // the metric.
    let rel: Vec<f64> = (1..=cfg.n_subcarriers)
        .map(|p| cfg.subcarrier_hz(p) - cfg.carrier_hz)
        .collect();
    let slope = |tau: f64| {
        let x: Vec<Complex64> = rel
            .iter()
            .map(|f| Complex64::from_polar(1.0, -two_pi * f * tau))
            .collect();
        let dx: Vec<Complex64> = rel
            .iter()
            .zip(&x)
            .map(|(f, z)| z * Complex64::new(0.0, -two_pi * f))
            .collect();
        target.metric_sq_slope(&x, &dx)
    };
    let (tau, _) = search_1d(
        grids.delay_refine,
        grids.delay_fine_max(),
        |n| grids.delay_at(n),
        |tau| target.metric(&delay_response(tau, cfg)),
        grids.polish.then_some(&slope as &dyn Fn(f64) -> f64),
    )?;
    Ok(tau)
}

/// Delay of `g_hat` maximizing `|gᴴ(τ)ĝ| / (‖g(τ)‖‖ĝ‖)`.
pub fn estimate_delay(g_hat: &[Complex64], cfg: &SystemConfig, grids: &SearchGrids) -> Result<f64> {
    if g_hat.len() != cfg.n_subcarriers {
        return Err(dim_err(format!(
            "ĝ has length {}, expected P={}",
            g_hat.len(),
            cfg.n_subcarriers
        )));
    }
    run_delay_search(&Target::from_vector(g_hat)?, cfg, grids)
}

/// `L` delays from the column span of a `P×L` block, picked greedily; each
/// detected delay is projected out of later candidates.
pub fn estimate_delays_subspace(
    g_block: &ComplexMatrix,
    n_paths: usize,
    cfg: &SystemConfig,
    grids: &SearchGrids,
) -> Result<Vec<f64>> {
    if g_block.nrows() != cfg.n_subcarriers {
        return Err(dim_err("delay block must have P rows"));
    }
    let mut target = Target::from_block(g_block)?;
    let mut out = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let tau = run_delay_search(&target, cfg, grids)?;
        out.push(tau);
        target.pick(&delay_response(tau, cfg));
    }
    Ok(out)
}

fn polar_search(target: &Target, book: &PolarCodebook) -> Result<(f64, f64)> {
    let g = &book.grids;
    // Coarse stage over the precomputed projected dictionary, with detected
    // atoms projected out: x_⊥ = x − PPᴴx.
    let (q, p) = (&target.q, &target.picked);
    let px = p.adjoint() * &book.projected;
    let corr = q.adjoint() * &book.projected - (q.adjoint() * p) * &px;
    let mut scored: Vec<(usize, f64)> = book
        .norms
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > 0.0)
        .map(|(j, n)| {
            let rest = (n * n - px.column(j).norm_squared()).max(0.0).sqrt();
            let v = if rest < RESIDUAL_FLOOR * n {
                0.0
            } else {
                corr.column(j).norm() / rest
            };
            (j, v)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if !scored.first().is_some_and(|s| s.1 >= DETECTION_FLOOR) {
        return Err(Error::NoDetection(DETECTION_FLOOR));
    }
    let r = g.polar_refine as i64;
    let max_u = g.sin_fine_max();
    // Best ring of one fine angle column, scanning every fine ring: the
    // distance ridge is too flat for a local window to climb reliably.
    let mut columns: std::collections::HashMap<i64, (i64, f64)> = std::collections::HashMap::new();
    let mut column = |nu: i64| -> (i64, f64) {
        *columns.entry(nu).or_insert_with(|| {
            book.ring_metrics(target, nu).into_iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (nr, v)| if v > acc.1 { (nr as i64, v) } else { acc },
            )
        })
    };
    // Fine windows around the best few coarse angle cells.
    let mut starts: Vec<i64> = Vec::new();
    for &(j, _) in &scored {
        let cu = ((j / g.n_range) as i64) * r;
        if starts.iter().all(|s| (s - cu).abs() > r) {
            starts.push(cu);
        }
        if starts.len() == COARSE_CANDIDATES {
            break;
        }
    }
    let mut overall = ((0, 0), f64::NEG_INFINITY);
    for start in starts {
        let mut c = start;
        let mut win = ((c, 0), f64::NEG_INFINITY);
        for _ in 0..MAX_RECENTER {
            let (lo, hi) = ((c - r).max(0), (c + r).min(max_u));
            for nu in lo..=hi {
                let (nr, v) = column(nu);
                if v > win.1 {
                    win = ((nu, nr), v);
                }
            }
            let bu = win.0 .0;
            let on_edge = (bu == lo && lo > 0) || (bu == hi && hi < max_u);
            if !on_edge || bu == c {
                break;
            }
            c = bu;
        }
        if win.1 > overall.1 {
            overall = win;
        }
    }
    let (u, rho) = (g.sin_at(overall.0 .0), g.inv_range_at(overall.0 .1));
    // A metric of one is an exact match already.
    let (u, rho) = if g.polish && overall.1 < 1.0 - 1e-12 {
        polish_polar(target, book, u, rho, overall.1)
    } else {
        (u, rho)
    };
    Ok((u.asin(), 1.0 / rho))
}

/// Damped Newton ascent in lattice-step units of `u = sinθ` and `ρ = 1/r`,
/// with finite-difference derivatives. The array reference sits at one end,
/// so the linear and quadratic phase terms are strongly correlated and the
/// ridge is tilted; coordinate-wise searches crawl along it.
fn polish_polar(target: &Target, book: &PolarCodebook, u0: f64, rho0: f64, v0: f64) -> (f64, f64) {
    let g = &book.grids;
    let (du, dr) = (g.fine_sin_step(), g.fine_inv_range_step());
    let (rho_lo, rho_hi) = (g.inv_range_at(0), g.inv_range_at(g.range_fine_max()));
    let clamp = |p: [f64; 2]| {
        [
            p[0].clamp(-g.max_sin / du, g.max_sin / du),
            p[1].clamp(rho_lo / dr, rho_hi / dr),
        ]
    };
    let metric = |p: [f64; 2]| {
        let u = (p[0] * du).clamp(-1.0, 1.0);
        target.metric(book.project(u.asin(), 1.0 / (p[1] * dr)).as_slice())
    };
    let h = POLISH_FD_STEP;
    let mut x = [u0 / du, rho0 / dr];
    let mut best = v0;
    for _ in 0..POLISH_ROUNDS {
        let f = |a: f64, b: f64| metric([x[0] + a, x[1] + b]);
        let (fpp, fmm) = (f(h, h), f(-h, -h));
        let (fpm, fmp) = (f(h, -h), f(-h, h));
        let (f10, f_10, f01, f0_1) = (f(h, 0.0), f(-h, 0.0), f(0.0, h), f(0.0, -h));
        let grad = [(f10 - f_10) / (2.0 * h), (f01 - f0_1) / (2.0 * h)];
        let h11 = (f10 - 2.0 * best + f_10) / (h * h);
        let h22 = (f01 - 2.0 * best + f0_1) / (h * h);
        let h12 = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
        let det = h11 * h22 - h12 * h12;
        let mut step = if h11 < 0.0 && det > 0.0 {
            [
                -(h22 * grad[0] - h12 * grad[1]) / det,
                -(h11 * grad[1] - h12 * grad[0]) / det,
            ]
        } else {
            grad
        };
        let len = step[0].hypot(step[1]);
        if !(len > 0.0) {
            break;
        }
        if len > POLISH_MAX_STEP {
            step = [
                step[0] * POLISH_MAX_STEP / len,
                step[1] * POLISH_MAX_STEP / len,
            ];
        }
        let mut moved = false;
        for _ in 0..20 {
            let cand = clamp([x[0] + step[0], x[1] + step[1]]);
            let v = metric(cand);
            if v > best {
                (x, best, moved) = (cand, v, true);
                break;
            }
            step = [0.5 * step[0], 0.5 * step[1]];
        }
        if !moved || step[0].hypot(step[1]) < 1e-9 {
            break;
        }
    }
    (x[0] * du, x[1] * dr)
}

/// Joint `(θ, r)` maximizing `|bᴴ W â| / (‖Wᴴb‖‖â‖)`.
pub fn estimate_angle_range(a_hat: &[Complex64], book: &PolarCodebook) -> Result<(f64, f64)> {
    if a_hat.len() != book.cfg.n_rf {
        return Err(dim_err(format!(
            "â has length {}, expected M={}",
            a_hat.len(),
            book.cfg.n_rf
        )));
    }
    polar_search(&Target::from_vector(a_hat)?, book)
}

/// `L` angle-distance pairs from the span of an `M×L` block.
pub fn estimate_angle_ranges_subspace(
    a_block: &ComplexMatrix,
    n_paths: usize,
    book: &PolarCodebook,
) -> Result<Vec<(f64, f64)>> {
    if a_block.nrows() != book.cfg.n_rf {
        return Err(dim_err("array block must have M rows"));
    }
    let mut target = Target::from_block(a_block)?;
    let mut out = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let (th, r) = polar_search(&target, book)?;
        out.push((th, r));
        target.pick(book.project(th, r).as_slice());
    }
    Ok(out)
}

/// Angle search at a known distance (delay-aided LoS path, `r̂ = c τ̂`).
pub fn estimate_angle_given_range(
    a_hat: &[Complex64],
    range: f64,
    book: &PolarCodebook,
) -> Result<f64> {
    if !(range > 0.0) {
        return Err(arg_err(format!("range must be positive, got {range}")));
    }
    if a_hat.len() != book.cfg.n_rf {
        return Err(dim_err(format!(
            "â has length {}, expected M={}",
            a_hat.len(),
            book.cfg.n_rf
        )));
    }
    let target = Target::from_vector(a_hat)?;
    let g = &book.grids;
    let metric = |u: f64| target.metric(book.project(u.clamp(-1.0, 1.0).asin(), range).as_slice());
    let h = 1e-4 * g.fine_sin_step();
    let slope = |u: f64| (metric(u + h) - metric(u - h)) / (2.0 * h);
    let (u, _) = search_1d(
        g.polar_refine,
        g.sin_fine_max(),
        |n| g.sin_at(n),
        metric,
        g.polish.then_some(&slope as &dyn Fn(f64) -> f64),
    )?;
    Ok(u.asin())
}

/// User association from the recovered symbol factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationResult {
    /// `user_of_column[j]`: pilot index assigned to estimated column `j`.
    pub user_of_column: Vec<usize>,
    /// `column_of_user[k]`: estimated column carrying user `k`.
    pub column_of_user: Vec<usize>,
    /// Normalized correlation of every column with its assigned pilot.
    pub scores: Vec<f64>,
}

impl AssociationResult {
    /// Permutation matrix `Π_s` with `Π_s[j, k] = 1` when column `j` is user `k`.
    pub fn permutation_matrix(&self) -> nalgebra::DMatrix<f64> {
        let k = self.user_of_column.len();
        let mut p = nalgebra::DMatrix::zeros(k, k);
        for (j, &u) in self.user_of_column.iter().enumerate() {
            p[(j, u)] = 1.0;
        }
        p
    }
}

/// Greedy association: every column takes its best pilot; on a conflict the
/// column with the higher correlation keeps the index and the other re-picks
/// among the indices it has not lost yet.
pub fn associate_users(s_hat: &ComplexMatrix, pilots: &PilotMatrix) -> Result<AssociationResult> {
    let so = pilots.matrix();
    let k = so.ncols();
    if s_hat.ncols() != k || s_hat.nrows() != so.nrows() {
        return Err(dim_err(format!(
            "Ŝ is {:?}, pilots are {:?}",
            s_hat.shape(),
            so.shape()
        )));
    }
    let mut corr = vec![vec![0.0; k]; k];
    for j in 0..k {
        let col = s_hat.column(j);
        let n = col.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::AssociationFailed(format!(
                "estimated column {j} is degenerate"
            )));
        }
        for (i, c) in corr[j].iter_mut().enumerate() {
            *c = so.column(i).dotc(&col).norm() / (so.column(i).norm() * n);
        }
    }
    let mut owner: Vec<Option<usize>> = vec![None; k];
    let mut lost = vec![vec![false; k]; k];
    let mut queue: std::collections::VecDeque<usize> = (0..k).collect();
    while let Some(j) = queue.pop_front() {
        let Some(i) = (0..k)
            .filter(|&i| !lost[j][i])
            .max_by(|&a, &b| corr[j][a].total_cmp(&corr[j][b]).then(b.cmp(&a)))
        else {
            return Err(Error::AssociationFailed(format!(
                "column {j} ran out of candidates"
            )));
        };
        match owner[i] {
            None => owner[i] = Some(j),
            Some(o) if corr[j][i] > corr[o][i] => {
                owner[i] = Some(j);
                lost[o][i] = true;
                queue.push_back(o);
            }
            Some(_) => {
                lost[j][i] = true;
                queue.push_back(j);
            }
        }
    }
    let column_of_user: Vec<usize> = owner
        .into_iter()
        .map(|o| o.expect("complete matching"))
        .collect();
    let mut user_of_column = vec![0; k];
    for (u, &j) in column_of_user.iter().enumerate() {
        user_of_column[j] = u;
    }
    let scores = (0..k).map(|j| corr[j][user_of_column[j]]).collect();
    Ok(AssociationResult {
        user_of_column,
        column_of_user,
        scores,
    })
}

/// LoS gains from the separated factors: per user, `Λ₁ = g̃ᴴĝ / ‖g̃‖²`,
/// `Λ₃ = s_kᴴŝ_k / ‖s_k‖²` and `α = b̃ᴴ(â Λ₁ Λ₃) / ‖b̃‖²` with `b̃ = Wᴴb`.
/// Columns of the factors must already be in user order. Returns the gains
/// and whether the estimated delay responses are ill-conditioned.
pub fn recover_los_gains(
    g_hat: &ComplexMatrix,
    a_hat: &ComplexMatrix,
    s_hat: &ComplexMatrix,
    estimates: &[(f64, f64, f64)],
    pilots: &PilotMatrix,
    book: &PolarCodebook,
) -> Result<(Vec<Complex64>, bool)> {
    let cfg = &book.cfg;
    let k = estimates.len();
    if g_hat.ncols() != k || a_hat.ncols() != k || s_hat.ncols() != k {
        return Err(dim_err("factor widths must equal the number of estimates"));
    }
    let g_tilde = ComplexMatrix::from_fn(cfg.n_subcarriers, k, |p, j| {
        Complex64::from_polar(
            1.0,
            -2.0 * std::f64::consts::PI * cfg.subcarrier_hz(p + 1) * estimates[j].0,
        )
    });
    let ill = crate::linalg::condition_number(&g_tilde) > 1e10;
    let so = pilots.matrix();
    let gains = estimates
        .iter()
        .enumerate()
        .map(|(j, &(_, th, r))| {
            let gt = g_tilde.column(j);
            let l1 = gt.dotc(&g_hat.column(j)) / gt.norm_squared();
            let l3 = so.column(j).dotc(&s_hat.column(j)) / so.column(j).norm_squared();
            let b = book.project(th, r);
            b.dotc(&a_hat.column(j)) * l1 * l3 / b.norm_squared()
        })
        .collect();
    Ok((gains, ill))
}

/// NLoS gains of one user block: `C = G̃† (λ₃ Ĝ Âᵀ) (B̃ᵀ)†` with the path
/// pairing chosen to maximize `Σ|C[i, σ(i)]|²`. Returns `(σ, α̂)`: delay `i`
/// pairs with polar estimate `σ[i]` and gain `α̂[i]`.
pub fn recover_block_gains(
    g_hat: &ComplexMatrix,
    a_hat: &ComplexMatrix,
    lambda3: Complex64,
    delays: &[f64],
    polar: &[(f64, f64)],
    book: &PolarCodebook,
) -> Result<(Vec<usize>, Vec<Complex64>)> {
    let cfg = &book.cfg;
    let l = delays.len();
    if polar.len() != l || g_hat.ncols() != l || a_hat.ncols() != l {
        return Err(dim_err("block widths and estimate counts differ"));
    }
    let g_tilde = ComplexMatrix::from_fn(cfg.n_subcarriers, l, |p, j| {
        delay_response(delays[j], cfg)[p]
    });
    let mut b_tilde = ComplexMatrix::zeros(cfg.n_rf, l);
    for (j, &(th, r)) in polar.iter().enumerate() {
        b_tilde.set_column(j, &book.project(th, r));
    }
    let x = g_hat * a_hat.transpose() * lambda3;
    let c = pinv(&g_tilde, 1e-10) * x * pinv(&b_tilde.transpose(), 1e-10);
    let sigma = best_pairing(&c);
    let gains = sigma.iter().enumerate().map(|(i, &j)| c[(i, j)]).collect();
    Ok((sigma, gains))
}

fn best_pairing(c: &ComplexMatrix) -> Vec<usize> {
    let l = c.nrows();
    let mut best: (Vec<usize>, f64) = ((0..l).collect(), f64::NEG_INFINITY);
    if l <= 6 {
        let mut perm: Vec<usize> = (0..l).collect();
        permute(&mut perm, 0, &mut |p: &[usize]| {
            let v: f64 = p
                .iter()
                .enumerate()
                .map(|(i, &j)| c[(i, j)].norm_sqr())
                .sum();
            if v > best.1 {
                best = (p.to_vec(), v);
            }
        });
        return best.0;
    }
    // Greedy on the largest remaining magnitude.
    let mut used_r = vec![false; l];
    let mut used_c = vec![false; l];
    let mut out = vec![0; l];
    for _ in 0..l {
        let mut pick = (0, 0, -1.0);
        for i in (0..l).filter(|&i| !used_r[i]) {
            for j in (0..l).filter(|&j| !used_c[j]) {
                if c[(i, j)].norm() > pick.2 {
                    pick = (i, j, c[(i, j)].norm());
                }
            }
        }
        used_r[pick.0] = true;
        used_c[pick.1] = true;
        out[pick.0] = pick.1;
    }
    out
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

/// Channels `ĥ_{p,k}` rebuilt from estimated paths.
pub fn reconstruct_channel(
    paths: &[Vec<PathParams>],
    cfg: &SystemConfig,
) -> Vec<Vec<Vec<Complex64>>> {
    crate::signal::channels_from_paths(paths, cfg)
}

/// `Σ‖h − ĥ‖² / Σ‖h‖²` over all users and subcarriers.
pub fn nmse(estimate: &[Vec<Vec<Complex64>>], truth: &[Vec<Vec<Complex64>>]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(dim_err("user counts differ"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, t) in estimate.iter().zip(truth) {
        if e.len() != t.len() {
            return Err(dim_err("subcarrier counts differ"));
        }
        for (he, ht) in e.iter().zip(t) {
            num += he
                .iter()
                .zip(ht)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>();
            den += ht.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
    }
    if !(den > 0.0) {
        return Err(Error::ZeroSignal);
    }
    Ok(num / den)
}

/// `(r cos θ, r sin θ)`.
pub fn localize(range: f64, angle: f64) -> Result<(f64, f64)> {
    if !(range > 0.0) {
        return Err(arg_err(format!("range must be positive, got {range}")));
    }
    Ok((range * angle.cos(), range * angle.sin()))
}
