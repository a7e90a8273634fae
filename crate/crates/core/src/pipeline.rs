//! End-to-end estimators: tensor decomposition followed by parameter
//! extraction, for the LoS (CPD) and NLoS (BTD) models.

use num_complex::Complex64;

use crate::btd::{btd_init, btd_nls, BtdModel, NlsOptions, DEFAULT_INIT_EPS};
use crate::cpd::{cpd_als, AlsInit, AlsOptions};
use crate::error::{dim_err, Error, Result};
use crate::extract::{
    associate_users, estimate_angle_given_range, estimate_angle_range,
    estimate_angle_ranges_subspace, estimate_delay, estimate_delays_subspace, localize, nmse,
    reconstruct_channel, recover_block_gains, recover_los_gains, AssociationResult, PolarCodebook,
    SearchGrids,
};
use crate::geometry::{delay_response, PathParams, SystemConfig, SPEED_OF_LIGHT};
use crate::linalg::{eigenvalues, pinv, svd_sorted, ComplexMatrix};
use crate::pilots::PilotMatrix;
use crate::signal::Scenario;
use crate::tensor::{FactorSet, Tensor3};

/// How the LoS angle and distance are obtained from the array factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleMode {
    /// 2-D search over the polar codebook.
    Joint,
    /// `r̂ = c τ̂`, then a 1-D angle search.
    DelayAided,
}

/// Parameters, positions and channels recovered for one received tensor.
#[derive(Debug, Clone)]
pub struct EstimationReport {
    /// `paths[k]`: estimated paths of user `k` (pilot order).
    pub paths: Vec<Vec<PathParams>>,
    /// LoS user positions; empty for NLoS.
    pub positions: Vec<(f64, f64)>,
    pub channels: Vec<Vec<Vec<Complex64>>>,
    pub association: AssociationResult,
    /// Relative fit error of the decomposition.
    pub fit_error: f64,
    /// Set when a gain solve saw an ill-conditioned delay matrix.
    pub ill_conditioned: bool,
}

/// Squared errors summed over users (`NaN` where not applicable).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub nmse: f64,
    pub sq_err_delay: f64,
    pub sq_err_angle: f64,
    pub sq_err_range: f64,
    pub sq_err_position: f64,
}

impl EstimationReport {
    pub fn score(&self, truth: &Scenario) -> Result<Score> {
        if self.paths.len() != truth.paths.len() {
            return Err(dim_err("estimated and true user counts differ"));
        }
        let nmse = nmse(&self.channels, &truth.channels())?;
        if !truth.is_los() || self.positions.is_empty() {
            return Ok(Score {
                nmse,
                sq_err_delay: f64::NAN,
                sq_err_angle: f64::NAN,
                sq_err_range: f64::NAN,
                sq_err_position: f64::NAN,
            });
        }
        let mut s = Score {
            nmse,
            sq_err_delay: 0.0,
            sq_err_angle: 0.0,
            sq_err_range: 0.0,
            sq_err_position: 0.0,
        };
        for (k, (est, tru)) in self.paths.iter().zip(&truth.paths).enumerate() {
            let (e, t) = (&est[0], &tru[0]);
            s.sq_err_delay += (e.delay - t.delay).powi(2);
            s.sq_err_angle += (e.angle - t.angle).powi(2);
            s.sq_err_range += (e.range - t.range).powi(2);
            let (tx, ty) = (t.range * t.angle.cos(), t.range * t.angle.sin());
            let (px, py) = self.positions[k];
            s.sq_err_position += (px - tx).powi(2) + (py - ty).powi(2);
        }
        Ok(s)
    }
}

fn reorder(m: &ComplexMatrix, order: &[usize]) -> ComplexMatrix {
    ComplexMatrix::from_fn(m.nrows(), order.len(), |i, j| m[(i, order[j])])
}

/// Starting factors from the delay structure of `G`: delays come from the
/// shift invariance of the leading `K`-dimensional mode-1 subspace (falling
/// back to a greedy grid search), then every row of `G† Y_(1)` is split into
/// `a_k ⊗ s_k` by a rank-one SVD.
pub fn delay_subspace_init(
    y: &Tensor3,
    k: usize,
    cfg: &SystemConfig,
    grids: &SearchGrids,
) -> Result<FactorSet> {
    let (p, m, t) = y.dims();
    let y1 = y.unfold(1)?;
    let (u, _, _) = svd_sorted(&y1);
    if u.ncols() < k {
        return Err(dim_err("mode-1 unfolding has fewer columns than users"));
    }
    let basis = u.columns(0, k).into_owned();
    let delays = match shift_invariant_delays(&basis, cfg) {
        Some(d) => d,
        None => estimate_delays_subspace(&basis, k, cfg, grids)?,
    };
    let mut g = ComplexMatrix::zeros(p, k);
    for (j, &tau) in delays.iter().enumerate() {
        for (pi, z) in delay_response(tau, cfg).into_iter().enumerate() {
            g[(pi, j)] = z;
        }
    }
    let x = pinv(&g, 1e-10) * y1;
    let mut a = ComplexMatrix::zeros(m, k);
    let mut s = ComplexMatrix::zeros(t, k);
    for j in 0..k {
        let row = ComplexMatrix::from_fn(m, t, |mi, ti| x[(j, mi + m * ti)]);
        let (ur, sv, vr) = svd_sorted(&row);
        let root = sv[0].sqrt();
        for mi in 0..m {
            a[(mi, j)] = ur[(mi, 0)] * root;
        }
        for ti in 0..t {
            s[(ti, j)] = vr[(ti, 0)].conj() * root;
        }
    }
    FactorSet::new(g, a, s)
}

/// Delays whose responses span `basis` (P×K), from the eigenvalues of the
/// one-subcarrier shift operator.
fn shift_invariant_delays(basis: &ComplexMatrix, cfg: &SystemConfig) -> Option<Vec<f64>> {
    let (p, k) = basis.shape();
    if p <= k {
        return None;
    }
    let upper = basis.rows(0, p - 1).into_owned();
    let lower = basis.rows(1, p - 1).into_owned();
    let psi = pinv(&upper, 1e-10) * lower;
    let z = eigenvalues(&psi).ok()?;
    let spacing = cfg.bandwidth_hz / p as f64;
    let period = 1.0 / spacing;
    z.iter()
        .map(|z| {
            if !(z.norm() > 0.0) || !z.arg().is_finite() {
                return None;
            }
            Some((-z.arg() / (2.0 * std::f64::consts::PI * spacing)).rem_euclid(period))
        })
        .collect()
}

/// Rank-K CPD of `y`. Pilot projection starts the ALS when `T ≥ K`; with
/// fewer pilot symbols than users both the SVD start and the delay-subspace
/// start are run and the better fit is kept.
pub fn fit_los(
    y: &Tensor3,
    pilots: &PilotMatrix,
    cfg: &SystemConfig,
    grids: &SearchGrids,
    als: &AlsOptions,
) -> Result<(FactorSet, f64)> {
    let mut opts = als.clone();
    if opts.pilots.is_none() {
        opts.pilots = Some(pilots.matrix().clone());
    }
    let k = pilots.n_users();
    let (f, report) = cpd_als(y, k, &opts)?;
    if opts.init != AlsInit::Auto || pilots.n_symbols() >= k {
        return Ok((f, report.fit_error));
    }
    let Ok(start) = delay_subspace_init(y, k, cfg, grids) else {
        return Ok((f, report.fit_error));
    };
    opts.init = AlsInit::Given(start);
    match cpd_als(y, k, &opts) {
        Ok((g, r)) if r.fit_error < report.fit_error => Ok((g, r.fit_error)),
        _ => Ok((f, report.fit_error)),
    }
}

/// LoS parameter extraction from CPD factors (columns in any order).
pub fn extract_los(
    factors: &FactorSet,
    fit_error: f64,
    pilots: &PilotMatrix,
    book: &PolarCodebook,
    mode: AngleMode,
) -> Result<EstimationReport> {
    let cfg = &book.cfg;
    let association = associate_users(&factors.s, pilots)?;
    let order = &association.column_of_user;
    let (g, a, s) = (
        reorder(&factors.g, order),
        reorder(&factors.a, order),
        reorder(&factors.s, order),
    );
    let k = order.len();
    let mut est = Vec::with_capacity(k);
    for j in 0..k {
        let g_col = g.column(j).into_owned();
        let a_col = a.column(j).into_owned();
        let tau = estimate_delay(g_col.as_slice(), cfg, &book.grids)?;
        let (theta, range) = match mode {
            AngleMode::Joint => estimate_angle_range(a_col.as_slice(), book)?,
            AngleMode::DelayAided => {
                let r = tau * SPEED_OF_LIGHT;
                if !(r > 0.0) {
                    return Err(Error::NoDetection(0.0));
                }
                (estimate_angle_given_range(a_col.as_slice(), r, book)?, r)
            }
        };
        est.push((tau, theta, range));
    }
    let (gains, ill) = recover_los_gains(&g, &a, &s, &est, pilots, book)?;
    let paths: Vec<Vec<PathParams>> = est
        .iter()
        .zip(&gains)
        .enumerate()
        .map(|(user, (&(delay, angle, range), &gain))| {
            vec![PathParams {
                user,
                gain,
                delay,
                angle,
                range,
            }]
        })
        .collect();
    let positions = est
        .iter()
        .map(|&(_, th, r)| localize(r, th))
        .collect::<Result<Vec<_>>>()?;
    let channels = reconstruct_channel(&paths, cfg);
    Ok(EstimationReport {
        paths,
        positions,
        channels,
        association,
        fit_error,
        ill_conditioned: ill,
    })
}

/// CPD followed by LoS extraction.
pub fn estimate_los(
    y: &Tensor3,
    pilots: &PilotMatrix,
    book: &PolarCodebook,
    mode: AngleMode,
    als: &AlsOptions,
) -> Result<EstimationReport> {
    let (f, fit) = fit_los(y, pilots, &book.cfg, &book.grids, als)?;
    extract_los(&f, fit, pilots, book, mode)
}

/// Rank-(L_k, L_k, 1) BTD via pilot initialization and LM refinement.
pub fn fit_nlos(
    y: &Tensor3,
    pilots: &PilotMatrix,
    block_sizes: &[usize],
    nls: &NlsOptions,
) -> Result<(BtdModel, f64)> {
    let init = btd_init(y, pilots, block_sizes, DEFAULT_INIT_EPS)?;
    let (model, _) = btd_nls(y, &init, nls)?;
    let fit = crate::btd::btd_relative_error(y, &model)?;
    Ok((model, fit))
}

/// NLoS path extraction from a BTD model (blocks in any order).
pub fn extract_nlos(
    model: &BtdModel,
    fit_error: f64,
    pilots: &PilotMatrix,
    book: &PolarCodebook,
) -> Result<EstimationReport> {
    let cfg = &book.cfg;
    let k = model.blocks.len();
    let t = pilots.n_symbols();
    let s_hat = ComplexMatrix::from_fn(t, k, |i, j| model.blocks[j].s[i]);
    let association = associate_users(&s_hat, pilots)?;
    let so = pilots.matrix();
    let mut paths = Vec::with_capacity(k);
    for (user, &j) in association.column_of_user.iter().enumerate() {
        let block = &model.blocks[j];
        let l = block.rank();
        let delays = estimate_delays_subspace(&block.g, l, cfg, &book.grids)?;
        let polar = estimate_angle_ranges_subspace(&block.a, l, book)?;
        let lambda3 = so.column(user).dotc(&block.s) / so.column(user).norm_squared();
        let (sigma, gains) =
            recover_block_gains(&block.g, &block.a, lambda3, &delays, &polar, book)?;
        paths.push(
            (0..l)
                .map(|i| {
                    let (angle, range) = polar[sigma[i]];
                    PathParams {
                        user,
                        gain: gains[i],
                        delay: delays[i],
                        angle,
                        range,
                    }
                })
                .collect::<Vec<_>>(),
        );
    }
    let channels = reconstruct_channel(&paths, cfg);
    Ok(EstimationReport {
        paths,
        positions: Vec::new(),
        channels,
        association,
        fit_error,
        ill_conditioned: false,
    })
}

/// BTD followed by NLoS extraction.
pub fn estimate_nlos(
    y: &Tensor3,
    pilots: &PilotMatrix,
    book: &PolarCodebook,
    block_sizes: &[usize],
    nls: &NlsOptions,
) -> Result<EstimationReport> {
    let (model, fit) = fit_nlos(y, pilots, block_sizes, nls)?;
    extract_nlos(&model, fit, pilots, book)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{los_gain, SystemConfig};
    use crate::linalg::c64;
    use crate::pilots::{design_pilots, random_combiner};
    use crate::signal::{add_noise, synthesize, ScenarioSampler};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn on_grid_scenario(seed: u64) -> (Scenario, PolarCodebook) {
        let cfg = SystemConfig::new(64, 16, 32, 4, 4, 100e9, 1e8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grids = SearchGrids::for_config(&cfg, 80.0, 2e-9);
        let comb = random_combiner(64, 16, &mut rng).unwrap();
        let book = PolarCodebook::new(&cfg, &grids, &comb).unwrap();
        let paths = (0..4)
            .map(|k| {
                let u = grids.sin_at(rng.random_range(300..3700));
                let range = 1.0 / grids.inv_range_at(rng.random_range(10..140));
                let delay = grids.delay_at(rng.random_range(1000..7000));
                let gain = los_gain(cfg.carrier_hz, range, 0.01, delay).unwrap();
                vec![PathParams {
                    user: k,
                    gain,
                    delay,
                    angle: u.asin(),
                    range,
                }]
            })
            .collect();
        let pilots = design_pilots(4, 4, &mut rng).unwrap();
        (Scenario::new(cfg, paths, pilots, comb).unwrap(), book)
    }

    #[test]
    fn noiseless_on_grid_los_is_exact() {
        let (sc, book) = on_grid_scenario(5);
        let y = synthesize(&sc);
        let rep = estimate_los(
            &y,
            &sc.pilots,
            &book,
            AngleMode::Joint,
            &AlsOptions::default(),
        )
        .unwrap();
        let s = rep.score(&sc).unwrap();
        assert!(s.nmse < 1e-6, "{s:?}");
        for (e, t) in rep.paths.iter().zip(&sc.paths) {
            assert!((e[0].gain - t[0].gain).norm() < 1e-8 * t[0].gain.norm());
        }
    }

    #[test]
    fn gains_ignore_factor_rescaling() {
        let (sc, book) = on_grid_scenario(6);
        let y = synthesize(&sc);
        let (f, fit) = fit_los(
            &y,
            &sc.pilots,
            &book.cfg,
            &book.grids,
            &AlsOptions::default(),
        )
        .unwrap();
        let base = extract_los(&f, fit, &sc.pilots, &book, AngleMode::Joint).unwrap();
        let c = c64(0.4, -2.0);
        let scaled = FactorSet::new(&f.g * c, &f.a / c, f.s.clone()).unwrap();
        let again = extract_los(&scaled, fit, &sc.pilots, &book, AngleMode::Joint).unwrap();
        for (p, q) in base.paths.iter().zip(&again.paths) {
            assert!((p[0].gain - q[0].gain).norm() < 1e-10 * p[0].gain.norm());
        }
    }

    #[test]
    fn real_gains_stay_real() {
        let (mut sc, book) = on_grid_scenario(7);
        for (k, g) in sc.paths.iter_mut().enumerate() {
            g[0].gain = c64(1e-5 * (k + 1) as f64, 0.0);
        }
        let y = synthesize(&sc);
        let rep = estimate_los(
            &y,
            &sc.pilots,
            &book,
            AngleMode::Joint,
            &AlsOptions::default(),
        )
        .unwrap();
        for p in &rep.paths {
            assert!(p[0].gain.im.abs() < 1e-8 * p[0].gain.re.abs());
        }
    }

    #[test]
    fn delay_aided_is_not_worse_at_high_snr() {
        let cfg = SystemConfig::new(64, 16, 64, 4, 4, 100e9, 1e8).unwrap();
        let sampler = ScenarioSampler::default();
        let mut better = 0;
        let trials = 10;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let comb = random_combiner(64, 16, &mut rng).unwrap();
            let pilots = design_pilots(4, 4, &mut rng).unwrap();
            let paths = sampler.los_paths(&cfg, &mut rng).unwrap();
            let sc = Scenario::new(cfg, paths, pilots, comb).unwrap();
            let book = PolarCodebook::new(
                &cfg,
                &SearchGrids::for_config(&cfg, 80.0, 2e-9),
                &sc.combiner,
            )
            .unwrap();
            let (y, _) = add_noise(&synthesize(&sc), 30.0, &mut rng).unwrap();
            let (f, fit) = fit_los(
                &y,
                &sc.pilots,
                &book.cfg,
                &book.grids,
                &AlsOptions::default(),
            )
            .unwrap();
            let joint = extract_los(&f, fit, &sc.pilots, &book, AngleMode::Joint)
                .unwrap()
                .score(&sc)
                .unwrap();
            let aided = extract_los(&f, fit, &sc.pilots, &book, AngleMode::DelayAided)
                .unwrap()
                .score(&sc)
                .unwrap();
            if aided.sq_err_position <= joint.sq_err_position {
                better += 1;
            }
        }
        assert!(better >= 9, "{better}/{trials}");
    }

    #[test]
    fn noiseless_nlos_recovers_channels() {
        let cfg = SystemConfig::new(64, 16, 32, 4, 2, 30e9, 1e8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let comb = random_combiner(64, 16, &mut rng).unwrap();
        let grids = SearchGrids::for_config(&cfg, 80.0, 2e-9);
        let book = PolarCodebook::new(&cfg, &grids, &comb).unwrap();
        let mk = |user, nd: i64, nu: i64, nr: i64, gain| PathParams {
            user,
            gain,
            delay: grids.delay_at(nd),
            angle: grids.sin_at(nu).asin(),
            range: 1.0 / grids.inv_range_at(nr),
        };
        let paths = vec![
            vec![mk(0, 2000, 800, 40, c64(1e-4, 2e-5))],
            vec![
                mk(1, 3000, 1500, 60, c64(-5e-5, 1e-4)),
                mk(1, 6200, 3100, 200, c64(3e-5, -6e-5)),
            ],
        ];
        let pilots = design_pilots(4, 2, &mut rng).unwrap();
        let sc = Scenario::new(cfg, paths, pilots, comb).unwrap();
        let y = synthesize(&sc);
        let rep = estimate_nlos(
            &y,
            &sc.pilots,
            &book,
            &sc.block_sizes(),
            &NlsOptions::default(),
        )
        .unwrap();
        let s = rep.score(&sc).unwrap();
        assert!(s.nmse < 1e-6, "{s:?}");
        assert!(s.sq_err_delay.is_nan());
    }
}
